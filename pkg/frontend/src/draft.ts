import type { Box, Point, PromptJson } from "./types.js";

export type Tool = "point" | "box" | "none";

export type CandidateSource =
  | { kind: "list"; candidates: string[] }
  | { kind: "class_set"; name: string };

const MIN_BOX_EDGE = 1e-3; // normalized; rejects zero-area drag accidents

/**
 * Mutable prompt under construction for the current image.
 *
 * Points and the box are stored normalized; the draft owns no server state
 * and maps to the wire prompt via {@link toPrompt}.
 */
export class PromptDraft {
  tool: Tool = "point";
  points: Point[] = [];
  box: Box | null = null;
  imageId: string | null = null;
  candidateSource: CandidateSource = { kind: "list", candidates: [] };

  private dragAnchor: Point | null = null;

  setTool(tool: Tool): void {
    this.tool = tool;
  }

  setImage(imageId: string): void {
    // A new image invalidates spatial state but not the tool choice.
    this.imageId = imageId;
    this.points = [];
    this.box = null;
    this.dragAnchor = null;
  }

  addPoint(x: number, y: number): void {
    assertNormalized(x, y);
    this.points.push([x, y]);
  }

  beginBox(x: number, y: number): void {
    assertNormalized(x, y);
    this.dragAnchor = [x, y];
  }

  /** Live box during a drag, for rubber-band rendering; null before drag. */
  previewBox(x: number, y: number): Box | null {
    if (!this.dragAnchor) return null;
    return orderedBox(this.dragAnchor, [x, y]);
  }

  /**
   * Finish a drag.  Returns true when a valid box was produced; a
   * degenerate (zero-width or zero-height) drag leaves the draft unchanged.
   */
  endBox(x: number, y: number): boolean {
    if (!this.dragAnchor) return false;
    assertNormalized(x, y);
    const box = orderedBox(this.dragAnchor, [x, y]);
    this.dragAnchor = null;
    if (box === null) return false;
    this.box = box;
    return true;
  }

  /** Remove the most recent mark: last point first, then the box. No-op when empty. */
  undo(): void {
    if (this.points.length > 0) {
      this.points.pop();
    } else if (this.box !== null) {
      this.box = null;
    }
  }

  /** Reset all marks and return to the point tool. History is not touched. */
  clear(): void {
    this.points = [];
    this.box = null;
    this.dragAnchor = null;
    this.tool = "point";
  }

  /** The wire prompt implied by the current marks. */
  toPrompt(): PromptJson {
    const havePoints = this.points.length > 0;
    const haveBox = this.box !== null;
    if (this.tool === "none" || (!havePoints && !haveBox)) {
      return { kind: "none" };
    }
    if (havePoints && haveBox) {
      return {
        kind: "points_and_box",
        points: this.points.map((p) => [...p] as Point),
        box: [...this.box!] as Box,
      };
    }
    if (havePoints) {
      return { kind: "points", points: this.points.map((p) => [...p] as Point) };
    }
    return { kind: "box", box: [...this.box!] as Box };
  }

  canSubmit(): boolean {
    return this.imageId !== null;
  }
}

function assertNormalized(x: number, y: number): void {
  if (!(x >= 0 && x <= 1 && y >= 0 && y <= 1)) {
    throw new Error(`coordinates must be normalized, got (${x}, ${y})`);
  }
}

function orderedBox(a: Point, b: Point): Box | null {
  const x0 = Math.min(a[0], b[0]);
  const x1 = Math.max(a[0], b[0]);
  const y0 = Math.min(a[1], b[1]);
  const y1 = Math.max(a[1], b[1]);
  if (x1 - x0 < MIN_BOX_EDGE || y1 - y0 < MIN_BOX_EDGE) return null;
  return [x0, y0, x1, y1];
}
