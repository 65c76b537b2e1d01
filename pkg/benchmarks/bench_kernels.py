#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
The numba path needs numba importable and MOVETAG_NO_NUMBA unset.
"""

from __future__ import annotations

import time

import numpy as np

from movetag import _kernels


def time_call(fn, *args, repeat=5):
    fn(*args)  # warm-up (and numba compilation)
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def main():
    rng = np.random.default_rng(0)
    cases = []

    entries = unit_rows(rng, 30_000, 1024)
    query = unit_rows(rng, 1, 1024)[0]
    excluded = rng.random(30_000) < 0.1
    cases.append(("top_k_cosine (30k x 1024, k=5)", "top_k_cosine",
                  (entries, query, excluded, 5)))

    emb = unit_rows(rng, 5_000, 1024)
    cases.append(("window_scores (5k x 1024, w=2)", "window_scores", (emb, 2)))

    scores = rng.random(50_000)
    gold = rng.random(50_000) < 0.3
    grid = np.round(np.arange(30, 100) / 100.0, 2)
    cases.append(("f1_grid (50k x 70 thresholds)", "f1_grid", (scores, gold, grid)))

    m = 3_000
    gold_labels = rng.integers(0, 6, size=m)
    pred_a = rng.integers(0, 6, size=m)
    pred_b = rng.integers(0, 6, size=m)
    swaps = rng.random((2_000, m)) < 0.5
    cases.append(("permutation_deltas (2000 x 3k)", "permutation_deltas",
                  (gold_labels, pred_a, pred_b, swaps, 6)))

    print(f"numba available: {_kernels.HAS_NUMBA}   active backend: {_kernels.BACKEND}\n")
    header = f"{'kernel':40s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, name, args in cases:
        t_np = time_call(getattr(_kernels, f"{name}_numpy"), *args)
        if _kernels.HAS_NUMBA:
            t_nb = time_call(getattr(_kernels, f"{name}_numba"), *args)
            print(f"{label:40s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.1f}x")
        else:
            print(f"{label:40s} {t_np * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
