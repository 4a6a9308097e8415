"""Paired one-sided Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25


class DegenerateInputError(ValueError):
    """Every paired difference is zero."""


class WilcoxonResult(NamedTuple):
    statistic: float
    pvalue: float
    n: int
    exact: bool


def _exact_lower_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(sum of randomly signed ranks <= w2) on the doubled (integer) scale."""
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks.tolist():
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return sum(counts[: w2 + 1]) / 2 ** len(doubled_ranks)


def wilcoxon_one_sided(paired_a: Sequence[float], paired_b: Sequence[float]) -> WilcoxonResult:
    """Test the alternative that ``a`` tends to be smaller than ``b``.

    Zero differences are dropped and tied magnitudes get average ranks.
    The statistic is the rank sum of positive differences ``a - b``; small
    values favour the alternative. Up to ``EXACT_MAX_N`` nonzero pairs the
    p-value is exact (permutation distribution of the observed midranks);
    beyond that a tie-corrected normal approximation with continuity
    correction is used.
    """
    a = np.asarray(paired_a, dtype=float)
    b = np.asarray(paired_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if len(a) < 6:
        raise ValueError("need at least 6 pairs")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise DegenerateInputError("all paired differences are zero")
    n = len(d)
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        p = _exact_lower_tail(doubled, int(round(2 * w)))
        return WilcoxonResult(w, p, n, True)
    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts ** 3 - tie_counts).sum() / 48
    z = (w - mean + 0.5) / math.sqrt(var)
    return WilcoxonResult(w, float(norm.cdf(z)), n, False)
