/** Vector-dump export: the file contract with the annotation pipeline's
 * file-backed embedding provider.
 *
 * Format: first line `dim=<d> provider=<id>`, then one record per line,
 * `<sha256 hex of the text> <base64 of d little-endian float32 values>`.
 * Vectors are unit-normalized; duplicate texts collapse to one record.
 * The file is written atomically (temp file + rename).
 */

import { createHash } from "node:crypto";
import { readFileSync, renameSync, writeFileSync } from "node:fs";

import { EmbeddingModel } from "./model.js";

export function textSha256(text: string): string {
  return createHash("sha256").update(text, "utf-8").digest("hex");
}

export function encodeRecord(vector: Float64Array): string {
  const buffer = Buffer.alloc(vector.length * 4);
  for (let i = 0; i < vector.length; i++) buffer.writeFloatLE(vector[i], i * 4);
  return buffer.toString("base64");
}

export function decodeRecord(payload: string, dim: number): Float64Array {
  const buffer = Buffer.from(payload, "base64");
  if (buffer.length !== dim * 4) throw new Error(`record has ${buffer.length / 4} values, expected ${dim}`);
  const out = new Float64Array(dim);
  for (let i = 0; i < dim; i++) out[i] = buffer.readFloatLE(i * 4);
  return out;
}

export function exportVectors(model: EmbeddingModel, texts: string[], outPath: string): number {
  const lines = [`dim=${model.dim} provider=${model.encoder.id}`];
  const seen = new Set<string>();
  for (const text of texts) {
    const digest = textSha256(text);
    if (seen.has(digest)) continue;
    seen.add(digest);
    lines.push(`${digest} ${encodeRecord(model.embed(text))}`);
  }
  const tmp = `${outPath}.tmp`;
  writeFileSync(tmp, lines.join("\n") + "\n", "utf-8");
  renameSync(tmp, outPath);
  return seen.size;
}

export interface DumpContents {
  dim: number;
  provider: string;
  records: Map<string, Float64Array>;
}

export function readDump(path: string): DumpContents {
  const lines = readFileSync(path, "utf-8").split("\n");
  const header = lines[0].trim();
  const dimMatch = /(?:^|\s)dim=(\d+)/.exec(header);
  if (!dimMatch) throw new Error(`malformed dump header: ${header}`);
  const dim = parseInt(dimMatch[1], 10);
  const provider = header.includes("provider=") ? header.split("provider=")[1] : "";
  const records = new Map<string, Float64Array>();
  for (const line of lines.slice(1)) {
    if (!line.trim()) continue;
    const [digest, payload] = line.split(" ");
    records.set(digest, decodeRecord(payload, dim));
  }
  return { dim, provider, records };
}
