/** Fine-tuning loop: batched contrastive loss on same-label pairs,
 * adaptive-moment optimizer with linear warmup, Spearman-based checkpoint
 * selection on a held-out pair set. */

import { encoderFor } from "./encoder.js";
import { EmbeddingModel } from "./model.js";
import { mnrlLoss, mnrlLossAndGrad } from "./mnrl.js";
import { LabeledText, TrainingPair, sampleCrossLabelPairs, samplePairs } from "./pairs.js";
import { Rng } from "./rng.js";
import { spearman } from "./spearman.js";
import { cosine } from "./vectors.js";

export interface TrainConfig {
  baseModel: string;
  epochs: number;
  batchSize: number;
  temperature: number;
  pairCap: number;
  evalFraction: number;
  seed: number;
  learningRate: number;
  warmupFraction: number;
}

export const DEFAULT_CONFIG: TrainConfig = {
  baseModel: "trigram-64",
  epochs: 3,
  batchSize: 64,
  // conventional contrastive temperature (scale 20); configurable
  temperature: 0.05,
  pairCap: 3000,
  evalFraction: 0.1,
  seed: 0,
  learningRate: 2e-5,
  warmupFraction: 0.1,
};

export function resolveConfig(partial: Partial<TrainConfig>): TrainConfig {
  const config = { ...DEFAULT_CONFIG, ...partial };
  if (config.batchSize < 2) throw new Error("batch size must be >= 2 for in-batch negatives");
  if (config.pairCap < 1) throw new Error("pair cap must be >= 1");
  if (!(config.temperature > 0)) throw new Error("temperature must be positive");
  return config;
}

export interface EpochStats {
  epoch: number;
  meanLoss: number;
  spearman: number | null;
}

export interface TrainResult {
  model: EmbeddingModel;
  history: EpochStats[];
  bestEpoch: number;
  evalPairs: number;
}

class Adam {
  private m: Float64Array;
  private v: Float64Array;
  private t = 0;

  constructor(size: number, private beta1 = 0.9, private beta2 = 0.999, private eps = 1e-8) {
    this.m = new Float64Array(size);
    this.v = new Float64Array(size);
  }

  step(weights: Float64Array, grad: Float64Array, lr: number): void {
    this.t++;
    const c1 = 1 - Math.pow(this.beta1, this.t);
    const c2 = 1 - Math.pow(this.beta2, this.t);
    for (let i = 0; i < weights.length; i++) {
      this.m[i] = this.beta1 * this.m[i] + (1 - this.beta1) * grad[i];
      this.v[i] = this.beta2 * this.v[i] + (1 - this.beta2) * grad[i] * grad[i];
      weights[i] -= (lr * (this.m[i] / c1)) / (Math.sqrt(this.v[i] / c2) + this.eps);
    }
  }
}

/** Held-out evaluation set: a fraction of the sampled pairs (target 1)
 * plus an equal number of random cross-label pairs (target 0).  Spearman
 * runs between cosine scores and these binary targets. */
export function buildEvalSet(
  pairs: TrainingPair[],
  utterances: LabeledText[],
  evalFraction: number,
  rng: Rng,
): { trainPairs: TrainingPair[]; evalPairs: TrainingPair[]; targets: number[] } {
  const shuffled = rng.shuffle([...pairs]);
  const holdout = Math.max(1, Math.floor(shuffled.length * evalFraction));
  const evalSame = shuffled.slice(0, holdout);
  const trainPairs = shuffled.slice(holdout);
  const evalCross = sampleCrossLabelPairs(utterances, evalSame.length, rng);
  return {
    trainPairs,
    evalPairs: [...evalSame, ...evalCross],
    targets: [...evalSame.map(() => 1), ...evalCross.map(() => 0)],
  };
}

function evaluate(model: EmbeddingModel, evalPairs: TrainingPair[], targets: number[]): number | null {
  if (evalPairs.length < 2 || new Set(targets).size < 2) return null;
  const scores = evalPairs.map((p) => cosine(model.embed(p.anchor), model.embed(p.positive)));
  return spearman(scores, targets);
}

export function fineTune(
  config: TrainConfig,
  utterances: LabeledText[],
  log: (line: string) => void = () => {},
): TrainResult {
  const encoder = encoderFor(config.baseModel);
  const model = new EmbeddingModel(encoder);
  const sampled = samplePairs(utterances, config.pairCap, config.seed);
  const rng = new Rng(config.seed + 1);
  const { trainPairs, evalPairs, targets } = buildEvalSet(
    sampled,
    utterances,
    config.evalFraction,
    rng,
  );
  log(`pairs: ${sampled.length} sampled, ${trainPairs.length} train, ${evalPairs.length} eval`);

  const history: EpochStats[] = [];
  let best = model.clone();
  let bestEpoch = 0;
  let bestScore = evaluate(model, evalPairs, targets) ?? -Infinity;

  const stepsPerEpoch = Math.ceil(trainPairs.length / config.batchSize);
  const totalSteps = Math.max(1, stepsPerEpoch * config.epochs);
  const warmupSteps = Math.max(1, Math.round(totalSteps * config.warmupFraction));
  const adam = new Adam(model.weights.length);
  const baseCache = new Map<string, Float64Array>();
  const baseOf = (text: string) => {
    let vec = baseCache.get(text);
    if (!vec) baseCache.set(text, (vec = encoder.encode(text)));
    return vec;
  };

  let step = 0;
  let diverged = false;
  for (let epoch = 1; epoch <= config.epochs && !diverged; epoch++) {
    const order = rng.shuffle([...trainPairs]);
    let lossSum = 0;
    let lossCount = 0;
    for (let start = 0; start < order.length; start += config.batchSize) {
      const batch = order.slice(start, start + config.batchSize);
      if (batch.length < 2) continue;
      const anchors = batch.map((p) => baseOf(p.anchor));
      const positives = batch.map((p) => baseOf(p.positive));
      const { mean, grad } = mnrlLossAndGrad(model, anchors, positives, config.temperature);
      if (!Number.isFinite(mean)) {
        log(`epoch ${epoch}: non-finite loss, keeping last finite checkpoint`);
        diverged = true;
        break;
      }
      step++;
      const lr =
        step <= warmupSteps
          ? (config.learningRate * step) / warmupSteps
          : config.learningRate;
      adam.step(model.weights, grad, lr);
      lossSum += mean;
      lossCount++;
    }
    const meanLoss = lossCount ? lossSum / lossCount : NaN;
    const score = evaluate(model, evalPairs, targets);
    history.push({ epoch, meanLoss, spearman: score });
    log(
      `epoch ${epoch}/${config.epochs}: loss ${meanLoss.toFixed(4)}` +
        (score === null ? "" : ` spearman ${score.toFixed(4)}`),
    );
    if (score !== null && score > bestScore) {
      bestScore = score;
      best = model.clone();
      bestEpoch = epoch;
    }
  }
  if (config.epochs === 0 || bestScore === -Infinity) {
    best = config.epochs === 0 ? model : best;
  }
  return { model: best, history, bestEpoch, evalPairs: evalPairs.length };
}

/** Sanity statistic for the trained space: mean same-label minus mean
 * cross-label cosine over all utterance pairs. */
export function labelCosineMargin(model: EmbeddingModel, utterances: LabeledText[]): {
  same: number;
  cross: number;
  margin: number;
} {
  const embedded = utterances.map((u) => ({ label: u.label, vec: model.embed(u.text) }));
  let sameSum = 0;
  let sameCount = 0;
  let crossSum = 0;
  let crossCount = 0;
  for (let i = 0; i < embedded.length; i++) {
    for (let j = i + 1; j < embedded.length; j++) {
      const value = cosine(embedded[i].vec, embedded[j].vec);
      if (embedded[i].label === embedded[j].label) {
        sameSum += value;
        sameCount++;
      } else {
        crossSum += value;
        crossCount++;
      }
    }
  }
  const same = sameCount ? sameSum / sameCount : 0;
  const cross = crossCount ? crossSum / crossCount : 0;
  return { same, cross, margin: same - cross };
}

export { mnrlLoss };
