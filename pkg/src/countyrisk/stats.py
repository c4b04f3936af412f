"""Two-group hypothesis tests and comparison-table construction.

Used by the suppressed-county comparison and the cluster profile table:
Welch's t-test for continuous indicators, a pooled two-proportion z-test
for binary ones, and the conventional significance stars.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, stdtr

from .errors import DegenerateTestWarning, EmptyGroupError

__all__ = [
    "WelchResult",
    "welch_t_test",
    "two_proportion_z_test",
    "significance_stars",
    "compare_groups",
    "ComparisonRow",
]


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    degenerate: bool = False


def welch_t_test(a, b) -> WelchResult:
    """Welch's unequal-variance t-test, two-sided.

    Uses the Satterthwaite degrees of freedom and the exact t survival
    function (regularized incomplete beta via scipy). Both samples need
    n >= 2. If both samples have zero variance the statistic is
    undefined: equal means are reported as t=0, p=1 with a
    DegenerateTestWarning; unequal means as an exact separation (p=0).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise EmptyGroupError("welch_t_test requires at least 2 values per group")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise EmptyGroupError("welch_t_test requires finite samples")

    na, nb = a.size, b.size
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    diff = a.mean() - b.mean()
    se2 = va / na + vb / nb

    if se2 == 0.0:
        warnings.warn("both samples constant; t undefined", DegenerateTestWarning)
        if diff == 0.0:
            return WelchResult(t=0.0, df=float(na + nb - 2), p=1.0, degenerate=True)
        t = math.inf if diff > 0 else -math.inf
        return WelchResult(t=t, df=float(na + nb - 2), p=0.0, degenerate=True)

    t = diff / math.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return WelchResult(t=float(t), df=float(df), p=min(p, 1.0))


def two_proportion_z_test(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z-test, two-sided. Returns (z, p)."""
    if n1 <= 0 or n2 <= 0:
        raise EmptyGroupError("two_proportion_z_test requires nonempty groups")
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    denom = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    if denom == 0.0:
        warnings.warn("pooled proportion is 0 or 1; z undefined", DegenerateTestWarning)
        return 0.0, 1.0
    z = (p1 - p2) / math.sqrt(denom)
    p = 2.0 * float(ndtr(-abs(z)))
    return float(z), min(p, 1.0)


def significance_stars(p: float) -> str:
    """Star notation at the 0.001 / 0.01 / 0.05 cut points, else 'ns'."""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass(frozen=True)
class ComparisonRow:
    """One indicator's two-group comparison.

    For continuous indicators the group summaries are (mean, sd); for
    binary ones they are (count, percent).
    """

    variable: str
    kind: str  # "continuous" | "binary"
    group_a: tuple[float, float]
    group_b: tuple[float, float]
    p_value: float
    stars: str


def compare_groups(variable: str, a, b, kind: str = "continuous") -> ComparisonRow:
    """Compare one indicator between two groups of counties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyGroupError(f"{variable}: one comparison group is empty")
    if kind == "binary":
        x1, x2 = int(a.sum()), int(b.sum())
        _, p = two_proportion_z_test(x1, a.size, x2, b.size)
        return ComparisonRow(
            variable=variable,
            kind=kind,
            group_a=(x1, 100.0 * x1 / a.size),
            group_b=(x2, 100.0 * x2 / b.size),
            p_value=p,
            stars=significance_stars(p),
        )
    res = welch_t_test(a, b)
    return ComparisonRow(
        variable=variable,
        kind="continuous",
        group_a=(float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0),
        group_b=(float(b.mean()), float(b.std(ddof=1)) if b.size > 1 else 0.0),
        p_value=res.p,
        stars=significance_stars(res.p),
    )
