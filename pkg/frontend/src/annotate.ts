/**
 * Annotation canvas geometry: pixel drags on the rendered image become
 * normalized rects, and normalized rects come back as pixel rects to draw.
 *
 * Everything normalized lives in [0, 1] with x_min <= x_max, y_min <= y_max
 * (the same rules the service enforces server-side). Pixel rects are in
 * rendered-image coordinates, not page coordinates; callers subtract the
 * image element's bounding rect before calling in here.
 */

import type { BoxArray } from './types.js';

export interface NormalizedRect {
  xMin: number;
  yMin: number;
  xMax: number;
  yMax: number;
}

export interface PixelRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export interface CanvasAnnotation {
  rect: NormalizedRect;
  label: string;
  state: 'draft' | 'committed';
}

const clamp01 = (v: number): number => Math.min(1, Math.max(0, v));

/**
 * Turn a pointer drag into a normalized rect, or null when the drag is
 * degenerate. Drags smaller than one rendered pixel on either axis are
 * rejected (that includes end === start). Drags that leave the image are
 * clamped to its edges.
 */
export function rectFromDrag(
  startX: number,
  startY: number,
  endX: number,
  endY: number,
  renderWidth: number,
  renderHeight: number,
): NormalizedRect | null {
  if (renderWidth <= 0 || renderHeight <= 0) return null;
  const left = Math.min(startX, endX);
  const right = Math.max(startX, endX);
  const top = Math.min(startY, endY);
  const bottom = Math.max(startY, endY);
  if (right - left < 1 || bottom - top < 1) return null;

  const rect: NormalizedRect = {
    xMin: clamp01(left / renderWidth),
    yMin: clamp01(top / renderHeight),
    xMax: clamp01(right / renderWidth),
    yMax: clamp01(bottom / renderHeight),
  };
  // clamping can collapse a drag that lay entirely outside the image
  if (rect.xMax - rect.xMin <= 0 || rect.yMax - rect.yMin <= 0) return null;
  return rect;
}

/** Project a normalized rect onto a rendered image size, for drawing. */
export function toPixels(
  rect: NormalizedRect,
  renderWidth: number,
  renderHeight: number,
): PixelRect {
  return {
    left: rect.xMin * renderWidth,
    top: rect.yMin * renderHeight,
    width: (rect.xMax - rect.xMin) * renderWidth,
    height: (rect.yMax - rect.yMin) * renderHeight,
  };
}

/** Service wire form ([x_min, y_min, x_max, y_max]) for a commit. */
export function toBoxArray(rect: NormalizedRect): BoxArray {
  return [rect.xMin, rect.yMin, rect.xMax, rect.yMax];
}

export function fromBoxArray(box: BoxArray): NormalizedRect {
  return { xMin: box[0], yMin: box[1], xMax: box[2], yMax: box[3] };
}

/** Largest per-corner pixel delta between two pixel rects. */
export function pixelDelta(a: PixelRect, b: PixelRect): number {
  return Math.max(
    Math.abs(a.left - b.left),
    Math.abs(a.top - b.top),
    Math.abs(a.left + a.width - (b.left + b.width)),
    Math.abs(a.top + a.height - (b.top + b.height)),
  );
}
