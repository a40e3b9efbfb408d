"""One-sided Student-t machinery for probability-shift audits.

Three test primitives are exposed: a paired one-sided t-test (the audit's
workhorse), an unpaired one-sided test in both Welch and pooled-variance
flavors (for disjoint image sets, e.g. physical marks), and a rank-shift
test that is the paired test applied to integer rank differences.

All accumulation happens in 64-bit floats regardless of input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc


@dataclass(frozen=True)
class TestResult:
    """Outcome of a single hypothesis test.

    ``degenerate`` is set when the sample variance is zero and the usual t
    statistic is undefined; ``p_value`` then follows the directional
    convention: 0 if the mean difference has the alternative's sign, 1
    otherwise (1 as well when every difference is exactly zero).
    """

    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    degenerate: bool = False


def t_sf(t: float, df: float) -> float:
    """Survival function P(T_df > t), the one-sided (greater) p-value.

    Computed through the regularized incomplete beta function without
    subtracting near-equal quantities, so small tail probabilities keep
    full absolute precision.
    """
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    t = float(t)
    x = df / (df + t * t)
    half_tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return half_tail if t >= 0 else 1.0 - half_tail


def t_cdf(t: float, df: float) -> float:
    """Student-t cumulative distribution P(T_df <= t)."""
    return t_sf(-t, df)


def _as64(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("samples must be one-dimensional")
    return arr


def _directional_degenerate(mean: float, df: float) -> TestResult:
    if mean == 0.0:
        return TestResult(math.nan, df, 1.0, degenerate=True)
    t = math.inf if mean > 0 else -math.inf
    return TestResult(t, df, 0.0 if mean > 0 else 1.0, degenerate=True)


def paired_one_sided_ttest(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Paired t-test of H1: mean(a - b) > 0.

    Uses the sample standard deviation (n-1 denominator) of the pairwise
    differences; df = n - 1.
    """
    a = _as64(a)
    b = _as64(b)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("paired test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = float(n - 1)
    if sd == 0.0:
        return _directional_degenerate(mean, df)
    t = mean / (sd / math.sqrt(n))
    return TestResult(t, df, t_sf(t, df))


def unpaired_one_sided_ttest(
    a: Sequence[float], b: Sequence[float], equal_var: bool = False
) -> TestResult:
    """Unpaired t-test of H1: mean(a) > mean(b).

    Welch's statistic with Welch-Satterthwaite degrees of freedom by
    default; ``equal_var=True`` switches to the pooled-variance Student
    form.
    """
    a = _as64(a)
    b = _as64(b)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise ValueError("unpaired test needs at least 2 samples per group")
    mean = float(a.mean() - b.mean())
    va = float(a.var(ddof=1))
    vb = float(b.var(ddof=1))
    if equal_var:
        pooled = ((n1 - 1) * va + (n2 - 1) * vb) / (n1 + n2 - 2)
        se2 = pooled * (1.0 / n1 + 1.0 / n2)
        df = float(n1 + n2 - 2)
    else:
        se2 = va / n1 + vb / n2
        if se2 > 0.0:
            df = se2 * se2 / (
                (va / n1) ** 2 / (n1 - 1) + (vb / n2) ** 2 / (n2 - 1)
            )
        else:
            df = math.nan
    if se2 == 0.0:
        return _directional_degenerate(mean, df)
    t = mean / math.sqrt(se2)
    return TestResult(t, float(df), t_sf(t, df))


def rank_shift_test(ranks_t: Sequence[int], ranks_t_prime: Sequence[int]) -> TestResult:
    """Paired one-sided test on rank shifts d = ranks_t' - ranks_t.

    H1: mean d > 0, i.e. the true mark earns a better (numerically
    smaller) rank than the external mark.
    """
    rt = _as64(ranks_t)
    rp = _as64(ranks_t_prime)
    return paired_one_sided_ttest(rp, rt)
