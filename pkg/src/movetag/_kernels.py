"""Numeric kernels behind search, boundary scoring, calibration and the
permutation test.

Every kernel ships in two versions: a pure-numpy implementation and a
numba ``@njit`` twin with the same contract.  The active backend is chosen
once at import time: numba when importable, numpy when the environment
variable ``MOVETAG_NO_NUMBA`` is set to a truthy value or numba is missing.
``benchmarks/bench_kernels.py`` times the two side by side.

All kernels are pure: randomness (the permutation swap matrix) is drawn by
the caller so both backends consume identical inputs.
"""

from __future__ import annotations

import os

import numpy as np

_NO_NUMBA = os.environ.get("MOVETAG_NO_NUMBA", "").strip().lower() not in ("", "0", "false")

try:
    if _NO_NUMBA:
        raise ImportError("numba disabled via MOVETAG_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# top-k cosine search over a flat index


def top_k_cosine_numpy(entries, query, excluded, k):
    """Top-k dot products of unit rows against a unit query.

    Excluded rows never appear in the result.  Ties break toward the lower
    row index (stable sort).  Returns (indices, scores), both of length
    min(k, number of non-excluded rows).

    Scores use elementwise multiply + pairwise sum rather than BLAS matvec:
    BLAS accumulates in row-position-dependent order, so bitwise-identical
    rows can score 1 ulp apart, silently breaking tie order.
    """
    scores = (entries * query).sum(axis=1)
    masked = np.where(excluded, -np.inf, scores)
    kk = min(int(k), int(np.count_nonzero(~excluded)))
    if kk <= 0:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    order = np.argsort(-masked, kind="stable")[:kk]
    return order.astype(np.int64), scores[order]


def window_scores_numpy(emb, w):
    """Smoothed window similarity per interior position.

    out[i] for i in [w, n-w] is the cosine of the normalized means of rows
    [i-w, i-1] and [i, i+w-1]; positions without two full windows are NaN.
    A window whose mean is numerically zero scores 0.0 against anything.
    """
    n, _ = emb.shape
    out = np.full(n, np.nan)
    if n < 2 * w:
        return out
    csum = np.vstack([np.zeros((1, emb.shape[1])), np.cumsum(emb, axis=0)])
    pos = np.arange(w, n - w + 1)
    left = csum[pos] - csum[pos - w]
    right = csum[pos + w] - csum[pos]
    ln = np.linalg.norm(left, axis=1)
    rn = np.linalg.norm(right, axis=1)
    dots = np.einsum("ij,ij->i", left, right)
    denom = ln * rn
    sims = np.where(denom > 1e-12, dots / np.maximum(denom, 1e-300), 0.0)
    out[pos] = np.clip(sims, -1.0, 1.0)
    return out


def f1_grid_numpy(scores, is_boundary, grid):
    """F1 of the boundary class at each grid threshold.

    A position is predicted as a boundary when score < threshold.  F1 is
    2TP / (2TP + FP + FN), defined as 0 when that denominator is 0.
    """
    pred = scores[:, None] < grid[None, :]
    gold = is_boundary[:, None]
    tp = (pred & gold).sum(axis=0).astype(np.float64)
    fp = (pred & ~gold).sum(axis=0).astype(np.float64)
    fn = (~pred & gold).sum(axis=0).astype(np.float64)
    denom = 2.0 * tp + fp + fn
    return np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1.0), 0.0)


def _kappa_from_rows(gold, pred, n_labels):
    m = gold.shape[0]
    po = float(np.count_nonzero(gold == pred)) / m
    pe = 0.0
    for lab in range(n_labels):
        pe += (np.count_nonzero(gold == lab) / m) * (np.count_nonzero(pred == lab) / m)
    if pe >= 1.0:
        return 1.0 if po >= 1.0 else 0.0
    return (po - pe) / (1.0 - pe)


def permutation_deltas_numpy(gold, pred_a, pred_b, swaps, n_labels):
    """Null distribution of kappa(A) - kappa(B) under per-target swapping.

    swaps is a (replicates, targets) boolean matrix; where True, the two
    conditions' predictions change places for that target.
    """
    reps = swaps.shape[0]
    out = np.empty(reps, np.float64)
    for r in range(reps):
        eff_a = np.where(swaps[r], pred_b, pred_a)
        eff_b = np.where(swaps[r], pred_a, pred_b)
        out[r] = _kappa_from_rows(gold, eff_a, n_labels) - _kappa_from_rows(
            gold, eff_b, n_labels
        )
    return out


if HAS_NUMBA:

    @njit(cache=True)
    def _top_k_cosine_jit(entries, query, excluded, k):
        n, d = entries.shape
        scores = np.empty(n, np.float64)
        avail = 0
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += entries[i, j] * query[j]
            scores[i] = s
            if not excluded[i]:
                avail += 1
        kk = min(k, avail)
        idx = np.empty(kk, np.int64)
        top = np.empty(kk, np.float64)
        taken = np.zeros(n, np.bool_)
        for r in range(kk):
            best = -1
            best_score = -np.inf
            for i in range(n):
                if excluded[i] or taken[i]:
                    continue
                if scores[i] > best_score:
                    best_score = scores[i]
                    best = i
            idx[r] = best
            top[r] = best_score
            taken[best] = True
        return idx, top

    def top_k_cosine_numba(entries, query, excluded, k):
        return _top_k_cosine_jit(entries, query, excluded, int(max(k, 0)))

    @njit(cache=True)
    def window_scores_numba(emb, w):
        n, d = emb.shape
        out = np.full(n, np.nan)
        if n < 2 * w:
            return out
        for i in range(w, n - w + 1):
            dot = 0.0
            ln = 0.0
            rn = 0.0
            for j in range(d):
                ls = 0.0
                rs = 0.0
                for t in range(i - w, i):
                    ls += emb[t, j]
                for t in range(i, i + w):
                    rs += emb[t, j]
                dot += ls * rs
                ln += ls * ls
                rn += rs * rs
            denom = np.sqrt(ln) * np.sqrt(rn)
            if denom > 1e-12:
                sim = dot / denom
                if sim > 1.0:
                    sim = 1.0
                elif sim < -1.0:
                    sim = -1.0
                out[i] = sim
            else:
                out[i] = 0.0
        return out

    @njit(cache=True)
    def f1_grid_numba(scores, is_boundary, grid):
        m = scores.shape[0]
        g = grid.shape[0]
        out = np.empty(g, np.float64)
        for t in range(g):
            tp = 0
            fp = 0
            fn = 0
            for i in range(m):
                pred = scores[i] < grid[t]
                if pred and is_boundary[i]:
                    tp += 1
                elif pred and not is_boundary[i]:
                    fp += 1
                elif not pred and is_boundary[i]:
                    fn += 1
            denom = 2 * tp + fp + fn
            out[t] = 2.0 * tp / denom if denom > 0 else 0.0
        return out

    @njit(cache=True)
    def permutation_deltas_numba(gold, pred_a, pred_b, swaps, n_labels):
        reps, m = swaps.shape
        gold_counts = np.zeros(n_labels, np.float64)
        for i in range(m):
            gold_counts[gold[i]] += 1.0
        out = np.empty(reps, np.float64)
        counts_a = np.empty(n_labels, np.float64)
        counts_b = np.empty(n_labels, np.float64)
        for r in range(reps):
            match_a = 0
            match_b = 0
            for lab in range(n_labels):
                counts_a[lab] = 0.0
                counts_b[lab] = 0.0
            for i in range(m):
                if swaps[r, i]:
                    ea = pred_b[i]
                    eb = pred_a[i]
                else:
                    ea = pred_a[i]
                    eb = pred_b[i]
                counts_a[ea] += 1.0
                counts_b[eb] += 1.0
                if ea == gold[i]:
                    match_a += 1
                if eb == gold[i]:
                    match_b += 1
            po_a = match_a / m
            po_b = match_b / m
            pe_a = 0.0
            pe_b = 0.0
            for lab in range(n_labels):
                pe_a += (gold_counts[lab] / m) * (counts_a[lab] / m)
                pe_b += (gold_counts[lab] / m) * (counts_b[lab] / m)
            if pe_a >= 1.0:
                ka = 1.0 if po_a >= 1.0 else 0.0
            else:
                ka = (po_a - pe_a) / (1.0 - pe_a)
            if pe_b >= 1.0:
                kb = 1.0 if po_b >= 1.0 else 0.0
            else:
                kb = (po_b - pe_b) / (1.0 - pe_b)
            out[r] = ka - kb
        return out

    BACKEND = "numba"
    top_k_cosine = top_k_cosine_numba
    window_scores = window_scores_numba
    f1_grid = f1_grid_numba
    permutation_deltas = permutation_deltas_numba
else:
    BACKEND = "numpy"
    top_k_cosine = top_k_cosine_numpy
    window_scores = window_scores_numpy
    f1_grid = f1_grid_numpy
    permutation_deltas = permutation_deltas_numpy
