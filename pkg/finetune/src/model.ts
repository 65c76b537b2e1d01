/** Embedding model: a frozen base encoder plus a trainable square
 * projection, initialized to the identity so an untrained model reproduces
 * the base vectors exactly. Checkpoints serialize the projection as
 * base64-encoded little-endian float64. */

import { mkdirSync, readFileSync, renameSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { TrigramEncoder, encoderFor } from "./encoder.js";
import { normalize } from "./vectors.js";

export interface CheckpointMeta {
  epoch: number;
  spearman: number | null;
  meanLoss: number | null;
  config: Record<string, unknown>;
}

export class EmbeddingModel {
  readonly encoder: TrigramEncoder;
  readonly dim: number;
  weights: Float64Array; // row-major dim x dim

  constructor(encoder: TrigramEncoder, weights?: Float64Array) {
    this.encoder = encoder;
    this.dim = encoder.dim;
    if (weights) {
      if (weights.length !== this.dim * this.dim) {
        throw new Error("projection size does not match encoder dimension");
      }
      this.weights = weights;
    } else {
      this.weights = identity(this.dim);
    }
  }

  /** W @ base, without normalization (training operates on raw outputs). */
  project(base: Float64Array): Float64Array {
    const d = this.dim;
    const out = new Float64Array(d);
    for (let r = 0; r < d; r++) {
      let s = 0;
      const row = r * d;
      for (let c = 0; c < d; c++) s += this.weights[row + c] * base[c];
      out[r] = s;
    }
    return out;
  }

  /** Unit-normalized embedding of a text. */
  embed(text: string): Float64Array {
    return normalize(this.project(this.encoder.encode(text)));
  }

  embedBatch(texts: string[]): Float64Array[] {
    return texts.map((t) => this.embed(t));
  }

  clone(): EmbeddingModel {
    return new EmbeddingModel(this.encoder, this.weights.slice());
  }
}

export function identity(dim: number): Float64Array {
  const w = new Float64Array(dim * dim);
  for (let i = 0; i < dim; i++) w[i * dim + i] = 1;
  return w;
}

function encodeWeights(weights: Float64Array): string {
  const buffer = Buffer.alloc(weights.length * 8);
  for (let i = 0; i < weights.length; i++) buffer.writeDoubleLE(weights[i], i * 8);
  return buffer.toString("base64");
}

function decodeWeights(payload: string, count: number): Float64Array {
  const buffer = Buffer.from(payload, "base64");
  if (buffer.length !== count * 8) throw new Error("checkpoint weight block has wrong size");
  const out = new Float64Array(count);
  for (let i = 0; i < count; i++) out[i] = buffer.readDoubleLE(i * 8);
  return out;
}

export function saveCheckpoint(dir: string, model: EmbeddingModel, meta: CheckpointMeta): void {
  mkdirSync(dir, { recursive: true });
  const payload = {
    base_model: model.encoder.id,
    dim: model.dim,
    weights: encodeWeights(model.weights),
    meta,
  };
  const path = join(dir, "checkpoint.json");
  const tmp = path + ".tmp";
  writeFileSync(tmp, JSON.stringify(payload));
  renameSync(tmp, path);
}

export function loadCheckpoint(dir: string): { model: EmbeddingModel; meta: CheckpointMeta } {
  const payload = JSON.parse(readFileSync(join(dir, "checkpoint.json"), "utf-8"));
  const encoder = encoderFor(payload.base_model);
  const weights = decodeWeights(payload.weights, payload.dim * payload.dim);
  return { model: new EmbeddingModel(encoder, weights), meta: payload.meta };
}
