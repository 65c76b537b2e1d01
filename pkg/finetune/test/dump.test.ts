import { readFileSync } from "node:fs";
import { join } from "node:path";
import { tmpdir } from "node:os";
import { mkdtempSync } from "node:fs";

import { describe, expect, it } from "vitest";

import { TrigramEncoder } from "../src/encoder.js";
import { EmbeddingModel } from "../src/model.js";
import { exportVectors, readDump, textSha256 } from "../src/dump.js";
import { norm } from "../src/vectors.js";

function freshModel(dim = 16): EmbeddingModel {
  return new EmbeddingModel(new TrigramEncoder(dim));
}

describe("vector dump export", () => {
  it("writes one unit-norm record per distinct text", () => {
    const dir = mkdtempSync(join(tmpdir(), "dump-"));
    const model = freshModel();
    const texts = Array.from({ length: 10 }, (_, i) => `utterance number ${i}`);
    const path = join(dir, "v.vecs");
    const written = exportVectors(model, texts, path);
    expect(written).toBe(10);

    const dump = readDump(path);
    expect(dump.dim).toBe(model.dim);
    expect(dump.provider).toBe(model.encoder.id);
    expect(dump.records.size).toBe(10);
    for (const text of texts) {
      const vector = dump.records.get(textSha256(text));
      expect(vector).toBeDefined();
      expect(Math.abs(norm(vector!) - 1)).toBeLessThan(1e-5);
    }
  });

  it("re-exports byte-identically and collapses duplicates", () => {
    const dir = mkdtempSync(join(tmpdir(), "dump-"));
    const model = freshModel();
    const texts = ["alpha beta", "gamma delta", "alpha beta"];
    const first = join(dir, "a.vecs");
    const second = join(dir, "b.vecs");
    expect(exportVectors(model, texts, first)).toBe(2);
    exportVectors(model, texts, second);
    expect(readFileSync(first)).toEqual(readFileSync(second));
  });
});
