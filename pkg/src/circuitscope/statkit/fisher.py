"""Fisher's exact test for 2x2 tables with exact integer arithmetic."""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

from .inference import TestResult

_REL_TOL = Fraction(1, 10**7)


@lru_cache(maxsize=4096)
def _hypergeom_weights(r1: int, r2: int, c1: int) -> tuple[int, tuple[int, ...]]:
    """Smallest admissible top-left cell and C(r1, x) * C(r2, c1 - x) for each x."""
    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    return lo, tuple(math.comb(r1, x) * math.comb(r2, c1 - x) for x in range(lo, hi + 1))


def fisher_exact(table, alternative: str = "two-sided", method: str = "minlike") -> TestResult:
    """Fisher's exact test on ``[[a, b], [c, d]]``.

    ``method="minlike"`` sums the probabilities of all margin-preserving tables
    no more likely than the observed one (relative tolerance 1e-7);
    ``method="double"`` doubles the smaller one-sided tail.
    ``alternative`` may also be "less" or "greater" (about the top-left cell).
    The statistic is the sample odds ratio.
    """
    (a, b), (c, d) = ((int(v) for v in row) for row in table)
    if min(a, b, c, d) < 0:
        raise ValueError("cells must be non-negative")
    n = a + b + c + d
    if n == 0:
        raise ValueError("table total must be positive")
    if b * c == 0:
        odds = math.nan if a * d == 0 else math.inf
    else:
        odds = (a * d) / (b * c)
    r1, r2, c1 = a + b, c + d, a + c
    if r1 == 0 or r2 == 0 or c1 == 0 or c1 == n:
        return TestResult(odds, 1.0)
    lo, w = _hypergeom_weights(r1, r2, c1)
    total = math.comb(n, c1)
    obs = w[a - lo]
    if alternative == "less":
        return TestResult(odds, float(Fraction(sum(w[: a - lo + 1]), total)))
    if alternative == "greater":
        return TestResult(odds, float(Fraction(sum(w[a - lo:]), total)))
    if alternative != "two-sided":
        raise ValueError(f"unknown alternative {alternative!r}")
    if method == "double":
        left = sum(w[: a - lo + 1])
        right = sum(w[a - lo:])
        return TestResult(odds, min(1.0, float(Fraction(2 * min(left, right), total))))
    if method != "minlike":
        raise ValueError(f"unknown method {method!r}")
    cut = obs * (1 + _REL_TOL)
    acc = sum(v for v in w if v <= cut)
    return TestResult(odds, min(1.0, float(Fraction(acc, total))))
