"""Benjamini-Hochberg false discovery rate control."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FdrResult:
    adjusted_p: np.ndarray
    rejected: np.ndarray
    alpha: float


def bh_adjust(p_values: Sequence[float], alpha: float = 0.05) -> FdrResult:
    """Step-up BH adjustment.

    adjusted[i] = min over sorted positions j >= rank(i) of (m / j) * p_(j),
    clamped to 1. A hypothesis is rejected when its adjusted value is <= alpha.
    """
    p = np.asarray(p_values, dtype=float).ravel()
    if p.size and (np.any(~np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return FdrResult(np.empty(0), np.empty(0, dtype=bool), alpha)
    order = np.argsort(p, kind="stable")
    scaled = np.empty(m)
    for j in range(m, 0, -1):
        scaled[j - 1] = m / j * p[order[j - 1]]
    running = np.minimum.accumulate(scaled[::-1])[::-1]
    adj = np.empty(m)
    adj[order] = np.minimum(running, 1.0)
    return FdrResult(adj, adj <= alpha, alpha)
