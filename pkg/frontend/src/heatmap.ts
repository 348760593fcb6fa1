import type { Heatmap } from "./types.js";

/** Viridis anchor stops; intermediate values are linearly interpolated. */
const STOPS: Array<[number, [number, number, number]]> = [
  [0.0, [68, 1, 84]],
  [0.25, [59, 82, 139]],
  [0.5, [33, 145, 140]],
  [0.75, [94, 201, 98]],
  [1.0, [253, 231, 37]],
];

export function colormap(t: number): [number, number, number] {
  const v = Math.min(1, Math.max(0, t));
  for (let i = 1; i < STOPS.length; i++) {
    const [t1, c1] = STOPS[i];
    if (v <= t1) {
      const [t0, c0] = STOPS[i - 1];
      const u = (v - t0) / (t1 - t0);
      return [
        Math.round(c0[0] + u * (c1[0] - c0[0])),
        Math.round(c0[1] + u * (c1[1] - c0[1])),
        Math.round(c0[2] + u * (c1[2] - c0[2])),
      ];
    }
  }
  return STOPS[STOPS.length - 1][1];
}

export function valueAt(heat: Heatmap, gx: number, gy: number): number {
  if (gx < 0 || gx >= heat.w || gy < 0 || gy >= heat.h) {
    throw new Error(`cell (${gx}, ${gy}) outside ${heat.w}x${heat.h} grid`);
  }
  return heat.values[gy * heat.w + gx];
}

/**
 * Render the attention grid as an overlay of colored cells.
 *
 * Cells are plain positioned divs (no canvas dependency), each carrying its
 * raw value in the title attribute so hovering shows the number.  The cell
 * alpha is the global opacity scaled by the cell value, which keeps
 * low-attention regions see-through.
 */
export function renderHeatmap(
  el: HTMLElement,
  heat: Heatmap,
  opacity: number,
): void {
  if (heat.values.length !== heat.h * heat.w) {
    throw new Error(
      `heatmap ${heat.h}x${heat.w} expects ${heat.h * heat.w} values, got ${heat.values.length}`,
    );
  }
  const doc = el.ownerDocument;
  el.textContent = "";
  el.dataset.gridH = String(heat.h);
  el.dataset.gridW = String(heat.w);
  const cellW = 100 / heat.w;
  const cellH = 100 / heat.h;
  for (let gy = 0; gy < heat.h; gy++) {
    for (let gx = 0; gx < heat.w; gx++) {
      const v = valueAt(heat, gx, gy);
      const [r, g, b] = colormap(v);
      const cell = doc.createElement("div");
      cell.className = "heat-cell";
      cell.title = v.toFixed(3);
      cell.dataset.value = String(v);
      cell.style.position = "absolute";
      cell.style.left = `${gx * cellW}%`;
      cell.style.top = `${gy * cellH}%`;
      cell.style.width = `${cellW}%`;
      cell.style.height = `${cellH}%`;
      cell.style.background = `rgba(${r}, ${g}, ${b}, ${(opacity * v).toFixed(4)})`;
      el.appendChild(cell);
    }
  }
}
