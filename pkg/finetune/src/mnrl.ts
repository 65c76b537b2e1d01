/** In-batch softmax contrastive loss over cosine similarities.
 *
 * For a batch of B (anchor, positive) pairs,
 *
 *   L_i = -log( exp(cos(a_i, p_i) / T) / sum_j exp(cos(a_i, p_j) / T) )
 *
 * so every other positive in the batch acts as an implicit negative.  The
 * batch loss is the mean over i.  `mnrlLossAndGrad` additionally
 * backpropagates through a square projection W applied to base vectors,
 * returning dL/dW for the optimizer.
 */

import { EmbeddingModel } from "./model.js";
import { assertFinite, dot, norm } from "./vectors.js";

export interface MnrlResult {
  perPair: number[];
  mean: number;
}

/** Row-stable softmax of z/T over each row of a BxB score matrix. */
function rowSoftmax(scores: number[][], temperature: number): number[][] {
  return scores.map((row) => {
    const scaled = row.map((s) => s / temperature);
    const max = Math.max(...scaled);
    const exps = scaled.map((z) => Math.exp(z - max));
    const total = exps.reduce((a, b) => a + b, 0);
    return exps.map((e) => e / total);
  });
}

function cosineMatrix(anchors: Float64Array[], positives: Float64Array[]): number[][] {
  const anchorNorms = anchors.map(norm);
  const positiveNorms = positives.map(norm);
  return anchors.map((a, i) =>
    positives.map((p, j) => dot(a, p) / (anchorNorms[i] * positiveNorms[j])),
  );
}

/** Loss on given vectors (unit-normalized by the caller per the contract;
 * raw vectors also work since cosine normalizes internally). */
export function mnrlLoss(
  anchors: Float64Array[],
  positives: Float64Array[],
  temperature: number,
): MnrlResult {
  const batch = anchors.length;
  if (batch < 2) throw new Error("in-batch negatives need a batch of at least 2");
  if (positives.length !== batch) throw new Error("anchor/positive count mismatch");
  if (!(temperature > 0)) throw new Error("temperature must be positive");
  anchors.forEach((a, i) => assertFinite(a, `anchor ${i}`));
  positives.forEach((p, i) => assertFinite(p, `positive ${i}`));

  const scores = cosineMatrix(anchors, positives);
  const perPair = scores.map((row, i) => {
    const scaled = row.map((s) => s / temperature);
    const max = Math.max(...scaled);
    const logSum = max + Math.log(scaled.reduce((acc, z) => acc + Math.exp(z - max), 0));
    return logSum - scaled[i];
  });
  return { perPair, mean: perPair.reduce((a, b) => a + b, 0) / batch };
}

export interface MnrlGradResult extends MnrlResult {
  /** dL/dW, row-major dim x dim, for the batch-mean loss. */
  grad: Float64Array;
}

/** Loss and projection gradient for base-vector batches run through W.
 *
 * With u_i = W a_i, v_j = W p_j, s_ij = cos(u_i, v_j):
 *   dL/ds_ij = (P_ij - delta_ij) / (B * T)
 *   ds_ij/du_i = (v_j/|v_j| - s_ij u_i/|u_i|) / |u_i|      (and symmetrically)
 *   dW = sum_i (dL/du_i) a_i^T + sum_j (dL/dv_j) p_j^T
 */
export function mnrlLossAndGrad(
  model: EmbeddingModel,
  baseAnchors: Float64Array[],
  basePositives: Float64Array[],
  temperature: number,
): MnrlGradResult {
  const batch = baseAnchors.length;
  if (batch < 2) throw new Error("in-batch negatives need a batch of at least 2");
  const d = model.dim;
  const u = baseAnchors.map((a) => model.project(a));
  const v = basePositives.map((p) => model.project(p));
  const uNorm = u.map(norm);
  const vNorm = v.map(norm);
  const scores = u.map((ui, i) => v.map((vj, j) => dot(ui, vj) / (uNorm[i] * vNorm[j])));
  const probs = rowSoftmax(scores, temperature);

  const perPair = scores.map((row, i) => {
    const scaled = row.map((s) => s / temperature);
    const max = Math.max(...scaled);
    const logSum = max + Math.log(scaled.reduce((acc, z) => acc + Math.exp(z - max), 0));
    return logSum - scaled[i];
  });

  const gradU = u.map(() => new Float64Array(d));
  const gradV = v.map(() => new Float64Array(d));
  for (let i = 0; i < batch; i++) {
    for (let j = 0; j < batch; j++) {
      const g = (probs[i][j] - (i === j ? 1 : 0)) / (batch * temperature);
      if (g === 0) continue;
      const s = scores[i][j];
      for (let t = 0; t < d; t++) {
        gradU[i][t] += g * (v[j][t] / vNorm[j] - (s * u[i][t]) / uNorm[i]) / uNorm[i];
        gradV[j][t] += g * (u[i][t] / uNorm[i] - (s * v[j][t]) / vNorm[j]) / vNorm[j];
      }
    }
  }

  const grad = new Float64Array(d * d);
  for (let i = 0; i < batch; i++) {
    for (let r = 0; r < d; r++) {
      const gu = gradU[i][r];
      const gv = gradV[i][r];
      const row = r * d;
      for (let c = 0; c < d; c++) {
        grad[row + c] += gu * baseAnchors[i][c] + gv * basePositives[i][c];
      }
    }
  }
  return { perPair, mean: perPair.reduce((a, b) => a + b, 0) / batch, grad };
}
