/**
 * One-in-flight task gate with latest-wins replacement.
 *
 * While a task runs, newer submissions overwrite each other and only the
 * most recent one executes once the running task settles.  This keeps rapid
 * prompt edits from stacking up a backlog of stale queries.
 */
export class LatestWins {
  private inflight = false;
  private pending: (() => Promise<void>) | null = null;

  /** Number of submissions superseded before running (for tests/telemetry). */
  dropped = 0;

  get busy(): boolean {
    return this.inflight;
  }

  async submit(task: () => Promise<void>): Promise<void> {
    if (this.inflight) {
      if (this.pending !== null) this.dropped += 1;
      this.pending = task;
      return;
    }
    this.inflight = true;
    try {
      await task();
    } finally {
      this.inflight = false;
      const next = this.pending;
      this.pending = null;
      if (next) await this.submit(next);
    }
  }
}
