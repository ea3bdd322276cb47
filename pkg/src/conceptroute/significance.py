"""Two-sample tests for comparing per-seed router accuracies."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, stdtr


class StatisticalError(ValueError):
    pass


@dataclass(frozen=True)
class SignificanceResult:
    test: str  # "t_test_two_tailed" | "mann_whitney_u"
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    df: float | None = None


def t_test_two_tailed(sample_a, sample_b) -> SignificanceResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite df."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise StatisticalError("each sample needs at least two observations")
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    se2 = va + vb
    if se2 == 0.0:
        if a.mean() == b.mean():
            return SignificanceResult("t_test_two_tailed", 0.0, 1.0, na, nb, float(na + nb - 2))
        raise StatisticalError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
    p = 2.0 * stdtr(df, -abs(t))
    return SignificanceResult("t_test_two_tailed", float(t), float(min(1.0, p)), na, nb, float(df))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b, method: str = "asymptotic") -> SignificanceResult:
    """Two-sided Mann-Whitney U; the statistic is U for ``sample_a``.

    ``asymptotic`` uses the tie-corrected normal approximation without
    continuity correction. ``exact`` enumerates every assignment of the
    pooled midranks to the two samples, which also handles ties; it is meant
    for small samples such as five runs per arm.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise StatisticalError("both samples need at least one observation")
    ranks = _midranks(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mean = n1 * n2 / 2.0
    if method == "asymptotic":
        n = n1 + n2
        _, counts = np.unique(ranks, return_counts=True)
        tie = float(np.sum(counts**3 - counts))
        var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
        if var <= 0.0:
            return SignificanceResult("mann_whitney_u", u, 1.0, n1, n2)
        z = (u - mean) / math.sqrt(var)
        p = 2.0 * ndtr(-abs(z))
    elif method == "exact":
        if math.comb(n1 + n2, n1) > 2_000_000:
            raise StatisticalError("sample too large for exact enumeration")
        offset = n1 * (n1 + 1) / 2.0
        dev = abs(u - mean)
        hits = total = 0
        for combo in itertools.combinations(range(n1 + n2), n1):
            total += 1
            if abs(ranks[list(combo)].sum() - offset - mean) >= dev - 1e-9:
                hits += 1
        p = hits / total
    else:
        raise ValueError(f"unknown method {method!r}")
    return SignificanceResult("mann_whitney_u", u, float(min(1.0, p)), n1, n2)
