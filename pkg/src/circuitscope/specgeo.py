"""Spectral geometry of the hallucination signal per component.

For each hallucination-pathway component, stack the hallucinating samples'
activations minus the correct-class mean and summarize the singular spectrum:
participation ratio, top-1 variance fraction, and the number of directions
needed for 90% of the variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .statkit import svd_spectrum
from .toyvlm import ComponentId, Outcome

RELATIVE_CUTOFF = 1e-10
VARIANCE_TARGET = 0.9
# Real-model ranges, shown beside toy results as context.
TOP1_BAND = (0.45, 0.69)
PR_BAND = (2.4, 6.8)


class UndefinedGeometry(ValueError):
    """Zero deviation matrix."""


@dataclass(frozen=True)
class GeometryRow:
    component: ComponentId | None
    participation_ratio: float
    top1_variance_fraction: float
    rank90: int
    n_samples: int
    rank: int

    def to_record(self) -> dict:
        return {
            "component": None if self.component is None else str(self.component),
            "participation_ratio": self.participation_ratio,
            "top1_variance_fraction": self.top1_variance_fraction,
            "rank90": self.rank90,
            "n_samples": self.n_samples,
            "rank": self.rank,
        }


def hallucination_deviation_matrix(activations: np.ndarray, outcomes: Sequence[Outcome]) -> np.ndarray:
    """Rows: hallucinating activations minus the mean of correct activations."""
    x = np.asarray(activations, dtype=float)
    cor = np.array([o == Outcome.CORRECT for o in outcomes])
    hal = np.array([o == Outcome.HALLUCINATING for o in outcomes])
    if cor.sum() < 2 or hal.sum() < 2:
        raise ValueError(f"need >= 2 Correct and >= 2 Hallucinating samples, have {cor.sum()} and {hal.sum()}")
    return x[hal] - x[cor].mean(axis=0)


def spectrum_summary(singular_values: Sequence[float], component: ComponentId | None = None,
                     n_samples: int = 0) -> GeometryRow:
    sv = np.sort(np.abs(np.asarray(singular_values, dtype=float)))[::-1]
    if sv.size == 0 or sv[0] == 0.0:
        raise UndefinedGeometry("all singular values are zero")
    sv = np.where(sv < RELATIVE_CUTOFF * sv[0], 0.0, sv)
    # normalize first so squares and fourth powers cannot overflow or underflow
    u = sv / sv[0]
    e = u * u
    total = float(np.sum(e))
    pr = total * total / float(np.sum(e * e))
    cum = np.cumsum(e)
    rank90 = int(np.searchsorted(cum, VARIANCE_TARGET * total * (1 - 1e-12)) + 1)
    return GeometryRow(component, pr, float(e[0] / total), rank90, n_samples, int(np.count_nonzero(sv)))


def geometry_row(delta_matrix: np.ndarray, component: ComponentId | None = None) -> GeometryRow:
    m = np.asarray(delta_matrix, dtype=float)
    if m.size == 0 or not np.any(m):
        raise UndefinedGeometry("deviation matrix is zero")
    return spectrum_summary(svd_spectrum(m).singular_values, component, m.shape[0])


@dataclass
class GeometrySummary:
    model_id: str
    rows: list[GeometryRow]
    skipped: list[str]

    @property
    def k(self) -> int:
        return len(self.rows)

    def means(self) -> dict:
        if not self.rows:
            return {"k": 0, "mean_pr": None, "mean_top1": None, "mean_rank90": None}
        return {
            "k": self.k,
            "mean_pr": float(np.mean([r.participation_ratio for r in self.rows])),
            "mean_top1": float(np.mean([r.top1_variance_fraction for r in self.rows])),
            "mean_rank90": float(np.mean([r.rank90 for r in self.rows])),
        }


def component_geometry(model_id: str, components: Sequence[ComponentId], activations_of,
                       outcomes: Sequence[Outcome]) -> GeometrySummary:
    """Rows for each component; ``activations_of(c)`` gives an (n, W) array."""
    rows, skipped = [], []
    for c in sorted(components):
        try:
            rows.append(geometry_row(hallucination_deviation_matrix(activations_of(c), outcomes), c))
        except ValueError as exc:
            skipped.append(f"{c}: {exc}")
    return GeometrySummary(model_id, rows, skipped)
