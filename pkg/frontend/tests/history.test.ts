import { describe, expect, it } from "vitest";
import { SessionHistory } from "../src/history.js";
import type { Match } from "../src/types.js";

const match: Match = { text: "a ring", score: 0.7, confidence: 0.9 };

function entry(overrides: object = {}) {
  return {
    at: "2026-08-23T12:00:00Z",
    imageId: "img_a",
    prompt: { kind: "points" as const, points: [[0.2, 0.3]] as [number, number][] },
    candidates: ["a ring", "a disk"],
    k: 2,
    top1: match,
    matches: [match],
    ...overrides,
  };
}

describe("SessionHistory", () => {
  it("assigns sequential seq numbers starting at 1", () => {
    const h = new SessionHistory();
    expect(h.append(entry()).seq).toBe(1);
    expect(h.append(entry()).seq).toBe(2);
    expect(h.length).toBe(2);
  });

  it("entries are frozen and the list is a snapshot", () => {
    const h = new SessionHistory();
    const row = h.append(entry());
    expect(Object.isFrozen(row)).toBe(true);
    const list = h.list();
    h.append(entry());
    expect(list).toHaveLength(1); // snapshot unaffected by later appends
  });

  it("replayRequest reproduces the original request", () => {
    const h = new SessionHistory();
    h.append(entry());
    expect(h.replayRequest(1)).toEqual({
      image_id: "img_a",
      prompt: { kind: "points", points: [[0.2, 0.3]] },
      k: 2,
      candidates: ["a ring", "a disk"],
    });
  });

  it("replayRequest carries class_set when that was the source", () => {
    const h = new SessionHistory();
    h.append(entry({ candidates: undefined, classSet: "shapes" }));
    expect(h.replayRequest(1).class_set).toBe("shapes");
    expect(h.replayRequest(1).candidates).toBeUndefined();
  });

  it("rejects unknown seq", () => {
    expect(() => new SessionHistory().replayRequest(1)).toThrow(/no history entry/);
  });
});
