"""Wall-time measurement of the FFT featurization path."""

from __future__ import annotations

import time

import numpy as np

from .filterbank import compute_filterbank
from .stu import featurize


def featurize_timings(L_values, K: int, d_in: int, repeats: int = 5, seed: int = 0) -> dict:
    """Median featurize wall time per length and consecutive doubling ratios.

    Banks are built with the matrix-free Lanczos path so setup stays cheap at
    large L; the timing covers only the convolution.  Repeats are interleaved
    across lengths so transient system load hits every length alike and the
    ratios stay a paired comparison.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for L in L_values:
        bank = compute_filterbank(L, K, method="lanczos")
        u = rng.standard_normal((1, L, d_in))
        featurize(bank, u)  # warm the FFT plan and allocator
        cases.append((bank, u, []))
    for _ in range(repeats):
        for bank, u, times in cases:
            t0 = time.perf_counter()
            featurize(bank, u)
            times.append(time.perf_counter() - t0)
    medians = [float(np.median(times)) for _, _, times in cases]
    ratios = [medians[i + 1] / medians[i] for i in range(len(medians) - 1)]
    return {
        "L": [int(L) for L in L_values],
        "K": K,
        "d_in": d_in,
        "repeats": repeats,
        "median_s": medians,
        "doubling_ratios": ratios,
    }
