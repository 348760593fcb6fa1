import type { Match, PromptJson, QueryRequest } from "./types.js";

export interface HistoryEntry {
  readonly seq: number;
  readonly at: string; // ISO-8601
  readonly imageId: string;
  /** The full prompt as sent, so the row alone can reproduce the query. */
  readonly prompt: PromptJson;
  readonly candidates?: readonly string[];
  readonly classSet?: string;
  readonly k: number;
  readonly top1: Match | null;
  readonly matches: readonly Match[];
}

/** Append-only record of the session's queries and their outcomes. */
export class SessionHistory {
  private readonly entries: HistoryEntry[] = [];

  append(entry: Omit<HistoryEntry, "seq">): HistoryEntry {
    const frozen = Object.freeze({ ...entry, seq: this.entries.length + 1 });
    this.entries.push(frozen);
    return frozen;
  }

  list(): readonly HistoryEntry[] {
    return this.entries.slice();
  }

  get length(): number {
    return this.entries.length;
  }

  /** Rebuild the exact request a past row was produced by. */
  replayRequest(seq: number): QueryRequest {
    const entry = this.entries[seq - 1];
    if (!entry) throw new Error(`no history entry ${seq}`);
    const req: QueryRequest = {
      image_id: entry.imageId,
      prompt: entry.prompt,
      k: entry.k,
    };
    if (entry.candidates) req.candidates = [...entry.candidates];
    if (entry.classSet) req.class_set = entry.classSet;
    return req;
  }
}
