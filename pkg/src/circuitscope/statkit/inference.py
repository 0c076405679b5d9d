"""t-tests, effect sizes, correlation and correlation-equivalence tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import normal_cdf, t_two_sided_p


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for a zero-variance input."""


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: float | None = None
    effect_size: float | None = None
    degenerate: bool = False

    __test__ = False  # not a pytest class

    def to_record(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "df": self.df,
            "effect_size": self.effect_size,
            "degenerate": self.degenerate,
        }


def _arr(x: Sequence[float]) -> np.ndarray:
    a = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError("inputs must be finite")
    return a


def _mean_var(a: np.ndarray) -> tuple[float, float]:
    m = math.fsum(a) / len(a)
    dev = a - m
    return m, math.fsum(dev * dev) / (len(a) - 1)


def cohens_d(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Standardized mean difference (a - b) using the pooled standard deviation."""
    a, b = _arr(sample_a), _arr(sample_b)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 values")
    ma, va = _mean_var(a)
    mb, vb = _mean_var(b)
    pooled = math.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    diff = ma - mb
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / pooled


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> TestResult:
    """Two-sided Welch t-test of mean(a) - mean(b); effect size is pooled-SD Cohen's d."""
    a, b = _arr(sample_a), _arr(sample_b)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 values")
    ma, va = _mean_var(a)
    mb, vb = _mean_var(b)
    d = cohens_d(a, b)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return TestResult(0.0, 1.0, float(na + nb - 2), d, degenerate=True)
        return TestResult(math.copysign(math.inf, diff), 0.0, float(na + nb - 2), d, degenerate=True)
    t = diff / math.sqrt(se2)
    fa, fb = sa / se2, sb / se2  # shares of the variance; avoids underflow in the squares
    df = 1.0 / (fa * fa / (na - 1) + fb * fb / (nb - 1))
    return TestResult(t, t_two_sided_p(t, df), df, d)


def one_sample_t(sample: Sequence[float], mu0: float = 0.0) -> TestResult:
    """Two-sided one-sample t-test of mean(sample) against ``mu0``."""
    a = _arr(sample)
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 values")
    m, v = _mean_var(a)
    diff = m - mu0
    df = float(n - 1)
    if v == 0.0:
        if diff == 0.0:
            return TestResult(0.0, 1.0, df, 0.0, degenerate=True)
        inf = math.copysign(math.inf, diff)
        return TestResult(inf, 0.0, df, inf, degenerate=True)
    s = math.sqrt(v)
    t = diff / (s / math.sqrt(n))
    return TestResult(t, t_two_sided_p(t, df), df, diff / s)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    a, b = _arr(x), _arr(y)
    if len(a) != len(b):
        raise ValueError("x and y must have equal length")
    if len(a) < 3:
        raise ValueError("need at least 3 pairs")
    da = a - math.fsum(a) / len(a)
    db = b - math.fsum(b) / len(b)
    sxx = math.fsum(da * da)
    syy = math.fsum(db * db)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a zero-variance input")
    r = math.fsum(da * db) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def tost_equivalence(r: float, n: int, bound: float = 0.3) -> TestResult:
    """Two one-sided tests that |rho| < bound, on the Fisher z scale.

    The p-value is the larger of the two one-sided p-values; equivalence is
    concluded when it falls below the chosen level.
    """
    if n < 4:
        raise ValueError("n must be >= 4")
    if not 0.0 < bound < 1.0:
        raise ValueError("bound must lie in (0, 1)")
    if abs(r) >= 1.0:
        return TestResult(math.copysign(math.inf, r), 1.0, None, r, degenerate=True)
    z = math.atanh(r)
    zb = math.atanh(bound)
    se = 1.0 / math.sqrt(n - 3)
    z_lower = (z + zb) / se  # H0: rho <= -bound
    z_upper = (z - zb) / se  # H0: rho >= +bound
    p_lower = normal_cdf(-z_lower)
    p_upper = normal_cdf(z_upper)
    p = max(p_lower, p_upper)
    stat = z_lower if p_lower >= p_upper else z_upper
    return TestResult(stat, min(1.0, p), None, r)
