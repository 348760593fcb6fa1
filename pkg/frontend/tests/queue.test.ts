import { describe, expect, it } from "vitest";
import { LatestWins } from "../src/queue.js";

function gate(): { promise: Promise<void>; open: () => void } {
  let open!: () => void;
  const promise = new Promise<void>((resolve) => (open = resolve));
  return { promise, open };
}

describe("LatestWins", () => {
  it("runs immediately when idle", async () => {
    const q = new LatestWins();
    const ran: string[] = [];
    await q.submit(async () => {
      ran.push("a");
    });
    expect(ran).toEqual(["a"]);
    expect(q.busy).toBe(false);
  });

  it("supersedes queued tasks so only the latest runs", async () => {
    const q = new LatestWins();
    const ran: string[] = [];
    const first = gate();

    const done = q.submit(async () => {
      ran.push("first");
      await first.promise;
    });
    void q.submit(async () => {
      ran.push("stale");
    });
    void q.submit(async () => {
      ran.push("latest");
    });

    expect(q.busy).toBe(true);
    first.open();
    await done;
    expect(ran).toEqual(["first", "latest"]);
    expect(q.dropped).toBe(1);
  });

  it("keeps serving after a task throws", async () => {
    const q = new LatestWins();
    await expect(
      q.submit(async () => {
        throw new Error("boom");
      }),
    ).rejects.toThrow("boom");
    const ran: string[] = [];
    await q.submit(async () => {
      ran.push("next");
    });
    expect(ran).toEqual(["next"]);
  });

  it("drains chains of queued work before the awaited promise resolves", async () => {
    const q = new LatestWins();
    const order: number[] = [];
    const first = gate();
    const done = q.submit(async () => {
      order.push(1);
      await first.promise;
    });
    void q.submit(async () => {
      order.push(2);
    });
    first.open();
    await done;
    expect(order).toEqual([1, 2]);
  });
});
