import type { Rle } from "./api.js";

/** Decode a row-major run-length encoding (counts alternate, zeros first). */
export function decodeRle(rle: Rle): Uint8Array {
  const total = rle.size.reduce((a, b) => a * b, 1);
  const out = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const count of rle.counts) {
    if (count < 0) throw new Error(`negative RLE count ${count}`);
    if (value) out.fill(1, pos, pos + count);
    pos += count;
    value = 1 - value;
  }
  if (pos !== total) {
    throw new Error(`RLE counts cover ${pos} pixels, mask has ${total}`);
  }
  return out;
}

export function maskArea(rle: Rle): number {
  let area = 0;
  let value = 0;
  for (const count of rle.counts) {
    if (value) area += count;
    value = 1 - value;
  }
  return area;
}
