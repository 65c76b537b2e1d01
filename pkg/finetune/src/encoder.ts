/** Deterministic base text encoder.
 *
 * A hashed character-trigram bag: each trigram of the lowercased, padded
 * text hashes (FNV-1a) to a dimension and a sign, accumulated and
 * L2-normalized.  No network, no model weights; two processes always agree
 * on the same text.  The trainable projection on top of these vectors is
 * what fine-tuning optimizes.
 */

import { normalize } from "./vectors.js";

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

export class TrigramEncoder {
  readonly id: string;
  readonly dim: number;

  constructor(dim = 64) {
    if (dim < 2) throw new Error("encoder dimension must be >= 2");
    this.dim = dim;
    this.id = `trigram-${dim}`;
  }

  encode(text: string): Float64Array {
    const out = new Float64Array(this.dim);
    const padded = `  ${text.toLowerCase().trim()}  `;
    for (let i = 0; i + 3 <= padded.length; i++) {
      const h = fnv1a(padded.slice(i, i + 3));
      const index = h % this.dim;
      const sign = (h >>> 16) & 1 ? 1 : -1;
      out[index] += sign;
    }
    // degenerate all-cancelled texts still need a direction
    if (!out.some((x) => x !== 0)) out[fnv1a(padded) % this.dim] = 1;
    return normalize(out);
  }

  encodeBatch(texts: string[]): Float64Array[] {
    return texts.map((t) => this.encode(t));
  }
}

/** Base-model registry: identifiers are `trigram-<dim>`. */
export function encoderFor(baseModel: string): TrigramEncoder {
  const match = /^trigram-(\d+)$/.exec(baseModel);
  if (!match) throw new Error(`unknown base model: ${baseModel}`);
  return new TrigramEncoder(parseInt(match[1], 10));
}
