import type { Rle } from "./api.js";
import { decodeRle } from "./rle.js";

export interface OverlayStyle {
  r: number;
  g: number;
  b: number;
  alpha: number;
}

export const SELECTED_STYLE: OverlayStyle = { r: 255, g: 64, b: 64, alpha: 140 };
export const DIMMED_STYLE: OverlayStyle = { r: 128, g: 128, b: 128, alpha: 60 };

/** RGBA pixel buffer for a mask overlay; drawn over the frame image. */
export function maskToRgba(rle: Rle, style: OverlayStyle): Uint8ClampedArray<ArrayBuffer> {
  const [height, width] = rle.size;
  const bits = decodeRle(rle);
  const out = new Uint8ClampedArray(new ArrayBuffer(width * height * 4));
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      const o = i * 4;
      out[o] = style.r;
      out[o + 1] = style.g;
      out[o + 2] = style.b;
      out[o + 3] = style.alpha;
    }
  }
  return out;
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  rle: Rle,
  style: OverlayStyle,
): void {
  const [height, width] = rle.size;
  const image = new ImageData(maskToRgba(rle, style), width, height);
  ctx.putImageData(image, 0, 0);
}
