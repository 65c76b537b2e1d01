import { describe, expect, it } from "vitest";

import { spearman } from "../src/spearman.js";

describe("spearman", () => {
  it("handles monotone and reversed sequences", () => {
    expect(spearman([1, 2, 3, 4], [10, 20, 30, 40])).toBeCloseTo(1, 12);
    expect(spearman([1, 2, 3, 4], [9, 5, 3, 1])).toBeCloseTo(-1, 12);
  });

  it("matches reference values on tied data", () => {
    // frozen from an independent statistics library
    expect(spearman([3.0, 1.0, 4.0, 1.0, 5.0], [0.1, 0.2, 0.3, 0.4, 0.5])).toBeCloseTo(
      0.4103913408340617,
      10,
    );
    expect(spearman([1.0, 2.0, 2.0, 3.0], [1.0, 0.0, 1.0, 1.0])).toBeCloseTo(0.0, 10);
    expect(
      spearman([0.9, 0.8, 0.7, 0.2, 0.1, 0.3], [1, 1, 1, 0, 0, 0]),
    ).toBeCloseTo(0.87831006565368, 10);
  });

  it("returns 0 for constant inputs and rejects bad shapes", () => {
    expect(spearman([1, 1, 1], [1, 2, 3])).toBe(0);
    expect(() => spearman([1], [1])).toThrow(/at least two/);
    expect(() => spearman([1, 2], [1])).toThrow(/mismatch/);
  });
});
