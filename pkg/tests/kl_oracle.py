"""Brute-force entropy-calibration oracle shared by unit and acceptance tests.

Re-derives the chosen clip threshold directly from the definition with
explicit loops: per candidate, build the tail-folded reference, merge to 128
levels (last level absorbs the remainder), spread each level's mass uniformly
over its nonzero reference bins, normalize, and take KL(reference||candidate).
Compiled with numba so scanning all 1921 candidates stays fast enough for the
500-histogram acceptance run.
"""
from __future__ import annotations

import numpy as np
from numba import njit

N_BINS = 2048
N_LEVELS = 128
KL_ZERO_SNAP = 1e-10


@njit(cache=True)
def _scan(counts):
    total = counts.sum()
    best_i = -1
    best_kl = 1e300
    ref = np.zeros(N_BINS, dtype=np.float64)
    cand = np.zeros(N_BINS, dtype=np.float64)
    for i in range(N_LEVELS, N_BINS + 1):
        for b in range(i):
            ref[b] = counts[b]
        tail = 0.0
        for b in range(i, N_BINS):
            tail += counts[b]
        ref[i - 1] += tail
        m = i // N_LEVELS
        for b in range(i):
            cand[b] = 0.0
        for j in range(N_LEVELS):
            start = j * m
            end = i if j == N_LEVELS - 1 else start + m
            mass = 0.0
            nsup = 0
            for b in range(start, end):
                mass += ref[b]
                if ref[b] > 0.0:
                    nsup += 1
            if nsup > 0:
                v = mass / nsup
                for b in range(start, end):
                    if ref[b] > 0.0:
                        cand[b] = v
        qsum = 0.0
        for b in range(i):
            qsum += cand[b]
        kl = 0.0
        for b in range(i):
            if ref[b] > 0.0:
                p = ref[b] / total
                q = cand[b] / qsum
                kl += p * np.log(p / q)
        if kl < KL_ZERO_SNAP:
            kl = 0.0
        if kl < best_kl:
            best_kl = kl
            best_i = i
    return best_i


def oracle_kl_threshold(bins: np.ndarray) -> int:
    """Index i of the exhaustively-minimizing candidate (smallest on ties)."""
    return int(_scan(np.ascontiguousarray(bins, dtype=np.float64)))
