import { describe, expect, it } from "vitest";

import { LabeledText, samplePairs } from "../src/pairs.js";

function group(label: string, n: number): LabeledText[] {
  return Array.from({ length: n }, (_, i) => ({ text: `${label} text ${i}`, label }));
}

describe("samplePairs", () => {
  it("two utterances give exactly one unordered pair", () => {
    const pairs = samplePairs(group("ACC", 2), 3000, 0);
    expect(pairs).toHaveLength(1);
    expect(pairs[0].anchor).not.toBe(pairs[0].positive);
  });

  it("caps a 100-utterance label at 3000 of its 4950 pairs", () => {
    const pairs = samplePairs(group("ACC", 100), 3000, 0);
    expect(pairs).toHaveLength(3000);
    const seen = new Set(pairs.map((p) => `${p.anchor}|${p.positive}`));
    expect(seen.size).toBe(3000); // all distinct
  });

  it("six labels over the cap give exactly 18000 pairs", () => {
    const labels = ["KET", "GSR", "RES", "ACC", "REV", "REA"];
    const utterances = labels.flatMap((label) => group(label, 100));
    const pairs = samplePairs(utterances, 3000, 1);
    expect(pairs).toHaveLength(18000);
  });

  it("never crosses labels and never pairs identical texts", () => {
    const utterances = [
      ...group("ACC", 30),
      ...group("KET", 30),
      // duplicate texts collapse inside a label group
      { text: "ACC text 0", label: "ACC" },
    ];
    const pairs = samplePairs(utterances, 100, 2);
    for (const pair of pairs) {
      expect(pair.anchor).not.toBe(pair.positive);
      expect(pair.anchor.startsWith(pair.label)).toBe(true);
      expect(pair.positive.startsWith(pair.label)).toBe(true);
    }
  });

  it("is deterministic under a seed", () => {
    const utterances = [...group("ACC", 50), ...group("KET", 40)];
    const first = samplePairs(utterances, 200, 9);
    const second = samplePairs(utterances, 200, 9);
    const third = samplePairs(utterances, 200, 10);
    expect(first).toEqual(second);
    expect(first).not.toEqual(third);
  });

  it("enumerates everything below the cap", () => {
    const pairs = samplePairs(group("REV", 10), 3000, 0);
    expect(pairs).toHaveLength(45); // C(10, 2)
  });

  it("errors when no label has two distinct texts", () => {
    expect(() => samplePairs(group("ACC", 1), 10, 0)).toThrow(/two distinct/);
    expect(() =>
      samplePairs(
        [
          { text: "same", label: "ACC" },
          { text: "same", label: "ACC" },
        ],
        10,
        0,
      ),
    ).toThrow(/two distinct/);
  });
});
