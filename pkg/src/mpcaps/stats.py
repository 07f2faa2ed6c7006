"""Wilcoxon signed-rank test for paired accuracy lists."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateError, InvalidArgument

EXACT_MAX_N = 12
MIN_PAIRS = 5


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float  # two-sided
    w_plus: float
    w_minus: float
    n: int  # pairs left after dropping zero differences
    method: str  # "exact" or "normal"


def _exact_p(ranks2: np.ndarray, w2: int) -> float:
    """P(min(W+, W-) <= w) under the null, by counting sign assignments.

    ``ranks2`` are doubled ranks (integers even with average ranks for ties).
    The count of assignments reaching each doubled W+ is built by dynamic
    programming over the ranks.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    wp = np.arange(total + 1)
    hit = np.minimum(wp, total - wp) <= w2
    return float(sum(counts[hit]) / 2 ** len(ranks2))


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided signed-rank test of ``a - b``.

    Zero differences are dropped; ties get average ranks. Exact enumeration
    is used for up to 12 pairs, otherwise the normal approximation with the
    tie-corrected variance (no continuity correction).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgument(f"paired lists must have equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateError("all paired differences are zero")
    n = d.size
    if n < MIN_PAIRS:
        raise InvalidArgument(f"need at least {MIN_PAIRS} non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        p = _exact_p(ranks2, int(round(2 * stat)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (stat - mean) / math.sqrt(var)
        p = math.erfc(abs(z) / math.sqrt(2.0))
        method = "normal"
    return WilcoxonResult(stat, min(1.0, p), w_plus, w_minus, n, method)
