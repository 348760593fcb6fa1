/** Stage ↔ image coordinate mapping with contain-fit letterboxing.
 *
 * The stage is the fixed-size interaction surface; the image is drawn inside
 * it at the largest scale that preserves aspect ratio, centered, leaving
 * letterbox bars on one axis.  Prompts travel as normalized image
 * coordinates, so clicks must round-trip stage→normalized→stage to within a
 * display pixel.
 */

export interface Size {
  width: number;
  height: number;
}

export interface Letterbox {
  /** Top-left corner of the drawn image, in stage pixels. */
  offsetX: number;
  offsetY: number;
  /** Drawn image size in stage pixels. */
  drawWidth: number;
  drawHeight: number;
}

export function letterbox(stage: Size, image: Size): Letterbox {
  if (stage.width <= 0 || stage.height <= 0) {
    throw new Error(`degenerate stage ${stage.width}x${stage.height}`);
  }
  if (image.width <= 0 || image.height <= 0) {
    throw new Error(`degenerate image ${image.width}x${image.height}`);
  }
  const scale = Math.min(
    stage.width / image.width,
    stage.height / image.height,
  );
  const drawWidth = image.width * scale;
  const drawHeight = image.height * scale;
  return {
    offsetX: (stage.width - drawWidth) / 2,
    offsetY: (stage.height - drawHeight) / 2,
    drawWidth,
    drawHeight,
  };
}

/**
 * Map a stage-pixel position to normalized image coordinates.
 *
 * Returns null for positions on the letterbox bars (outside the drawn
 * image); boundary positions clamp into [0, 1].
 */
export function toNormalized(
  px: number,
  py: number,
  fit: Letterbox,
): { x: number; y: number } | null {
  const x = (px - fit.offsetX) / fit.drawWidth;
  const y = (py - fit.offsetY) / fit.drawHeight;
  // Half-pixel slack so edge clicks on the image border still register.
  const slackX = 0.5 / fit.drawWidth;
  const slackY = 0.5 / fit.drawHeight;
  if (x < -slackX || x > 1 + slackX || y < -slackY || y > 1 + slackY) {
    return null;
  }
  return {
    x: Math.min(1, Math.max(0, x)),
    y: Math.min(1, Math.max(0, y)),
  };
}

/** Map normalized image coordinates back to stage pixels. */
export function toStage(
  x: number,
  y: number,
  fit: Letterbox,
): { px: number; py: number } {
  return {
    px: fit.offsetX + x * fit.drawWidth,
    py: fit.offsetY + y * fit.drawHeight,
  };
}
