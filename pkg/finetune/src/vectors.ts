/** Small dense-vector helpers used throughout training and export. */

export function dot(a: Float64Array, b: Float64Array): number {
  let s = 0;
  for (let i = 0; i < a.length; i++) s += a[i] * b[i];
  return s;
}

export function norm(a: Float64Array): number {
  return Math.sqrt(dot(a, a));
}

/** Scale to unit L2 norm; near-zero vectors are an error. */
export function normalize(a: Float64Array): Float64Array {
  const n = norm(a);
  if (!(n > 1e-12)) throw new Error("cannot normalize a near-zero vector");
  const out = new Float64Array(a.length);
  for (let i = 0; i < a.length; i++) out[i] = a[i] / n;
  return out;
}

/** Cosine similarity of two (not necessarily unit) vectors, clamped to [-1, 1]. */
export function cosine(a: Float64Array, b: Float64Array): number {
  const na = norm(a);
  const nb = norm(b);
  if (!(na > 1e-12) || !(nb > 1e-12)) throw new Error("cosine of a near-zero vector");
  return Math.max(-1, Math.min(1, dot(a, b) / (na * nb)));
}

export function assertFinite(a: Float64Array, what: string): void {
  for (let i = 0; i < a.length; i++) {
    if (!Number.isFinite(a[i])) throw new Error(`non-finite value in ${what}`);
  }
}
