/** Training-pair sampling: uniform random distinct same-label pairs, capped
 * per label so frequent labels cannot dominate the gradient.  Texts are
 * deduplicated within each label group first (an anchor must differ from
 * its positive). */

import { Rng } from "./rng.js";

export interface LabeledText {
  text: string;
  label: string;
}

export interface TrainingPair {
  anchor: string;
  positive: string;
  label: string;
}

export function samplePairs(
  utterances: LabeledText[],
  cap: number,
  seed: number,
): TrainingPair[] {
  if (cap < 1) throw new Error("pair cap must be >= 1");
  const byLabel = new Map<string, string[]>();
  for (const item of utterances) {
    if (!item.label) continue;
    let texts = byLabel.get(item.label);
    if (!texts) byLabel.set(item.label, (texts = []));
    if (!texts.includes(item.text)) texts.push(item.text);
  }

  const rng = new Rng(seed);
  const pairs: TrainingPair[] = [];
  const labels = [...byLabel.keys()].sort();
  let anyPairable = false;
  for (const label of labels) {
    const texts = byLabel.get(label)!;
    const n = texts.length;
    if (n < 2) continue;
    anyPairable = true;
    const available = (n * (n - 1)) / 2;
    if (available <= cap) {
      for (let i = 0; i < n; i++) {
        for (let j = i + 1; j < n; j++) {
          pairs.push({ anchor: texts[i], positive: texts[j], label });
        }
      }
    } else {
      const seen = new Set<number>();
      while (seen.size < cap) {
        const i = rng.int(n);
        const j = rng.int(n);
        if (i === j) continue;
        const lo = Math.min(i, j);
        const hi = Math.max(i, j);
        const key = lo * n + hi;
        if (seen.has(key)) continue;
        seen.add(key);
        pairs.push({ anchor: texts[lo], positive: texts[hi], label });
      }
    }
  }
  if (!anyPairable) {
    throw new Error("no label group has two distinct texts to pair");
  }
  return pairs;
}

/** Random cross-label pairs for the evaluation target set. */
export function sampleCrossLabelPairs(
  utterances: LabeledText[],
  count: number,
  rng: Rng,
): TrainingPair[] {
  const labeled = utterances.filter((u) => u.label);
  const labels = new Set(labeled.map((u) => u.label));
  if (labels.size < 2) return [];
  const pairs: TrainingPair[] = [];
  let guard = 0;
  while (pairs.length < count && guard < count * 100) {
    guard++;
    const a = labeled[rng.int(labeled.length)];
    const b = labeled[rng.int(labeled.length)];
    if (a.label === b.label || a.text === b.text) continue;
    pairs.push({ anchor: a.text, positive: b.text, label: `${a.label}|${b.label}` });
  }
  return pairs;
}
