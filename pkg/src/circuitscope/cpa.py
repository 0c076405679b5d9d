"""Joint-versus-individual restoration analysis per pathway.

For a pathway P restored all at once, the interaction is IE(P) minus the sum
of its members' single-component effects, and MagDiff compares magnitudes
instead: |IE(P)| minus the sum of |IE(c)|. Grounding and hallucination
members are never mixed in one joint restoration, since effects of opposite
sign would cancel in the sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .circuits import Circuit, Pathway
from .patchengine import JointTrace, SampleTrace, indirect_effect
from .statkit import TestResult, one_sample_t, welch_t
from .toyvlm import ComponentId, Outcome

# Real-model grounding-pathway positive fractions, shown beside toy results as context.
GROUNDING_F_POS_BAND = {Outcome.CORRECT: (0.61, 0.83), Outcome.HALLUCINATING: (0.21, 0.33)}
SUBSETS = (Outcome.CORRECT, Outcome.HALLUCINATING)


class ConsistencyError(ValueError):
    """Trace and joint trace do not describe the same sample and pathway."""


@dataclass(frozen=True)
class CpaSampleRow:
    sample_id: int
    subset: Outcome
    pathway: Pathway
    joint_ie: float
    individual_ies: tuple[float, ...]
    interaction: float
    mag_diff: float

    @property
    def magnitude_ratio(self) -> float | None:
        den = sum(abs(v) for v in self.individual_ies)
        if den == 0.0:
            return None
        return abs(self.joint_ie) / den

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "subset": self.subset.value,
            "pathway": self.pathway.value,
            "joint_ie": self.joint_ie,
            "individual_ies": list(self.individual_ies),
            "interaction": self.interaction,
            "mag_diff": self.mag_diff,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CpaSampleRow":
        return cls(int(rec["sample_id"]), Outcome(rec["subset"]), Pathway(rec["pathway"]),
                   float(rec["joint_ie"]), tuple(float(v) for v in rec["individual_ies"]),
                   float(rec["interaction"]), float(rec["mag_diff"]))


def _sum(values) -> float:
    # left-to-right so that the stored identities recompute exactly
    total = 0.0
    for v in values:
        total += v
    return total


def cpa_per_sample(trace: SampleTrace, joint: JointTrace, pathway_members: Sequence[ComponentId],
                   pathway: Pathway = Pathway.GROUNDING) -> CpaSampleRow:
    if trace.sample_id != joint.sample_id:
        raise ConsistencyError(f"sample ids differ: {trace.sample_id} vs {joint.sample_id}")
    members = tuple(sorted(pathway_members))
    if members != tuple(sorted(joint.pathway_components)):
        raise ConsistencyError("pathway members do not match the joint restoration")
    if joint.delta_corrupt != trace.delta_corrupt:
        raise ConsistencyError("corrupt runs differ; noise seeds must match")
    if trace.outcome == Outcome.MISS:
        raise ConsistencyError("Miss samples belong to neither subset")
    try:
        ies = tuple(indirect_effect(trace, c) for c in members)
    except KeyError as exc:
        raise ConsistencyError(f"trace lacks a single-component patch for {exc}") from None
    joint_ie = joint.delta_joint - joint.delta_corrupt
    return CpaSampleRow(
        sample_id=trace.sample_id,
        subset=trace.outcome,
        pathway=pathway,
        joint_ie=joint_ie,
        individual_ies=ies,
        interaction=joint_ie - _sum(ies),
        mag_diff=abs(joint_ie) - _sum(abs(v) for v in ies),
    )


@dataclass
class CellDiagnostics:
    pathway: Pathway
    subset: Outcome
    n: int
    available: bool = True
    mean_individual_ie: float = float("nan")
    fraction_positive: float = float("nan")
    magnitude_ratio: float = float("nan")
    magnitude_ratio_median: float = float("nan")
    magnitude_ratio_of_means: float = float("nan")
    mean_mag_diff: float = float("nan")
    mean_interaction: float = float("nan")
    magdiff_vs_zero: TestResult | None = None

    def to_record(self) -> dict:
        return {
            "pathway": self.pathway.value,
            "subset": self.subset.value,
            "n": self.n,
            "available": self.available,
            "mean_individual_ie": self.mean_individual_ie,
            "fraction_positive": self.fraction_positive,
            "magnitude_ratio": self.magnitude_ratio,
            "magnitude_ratio_median": self.magnitude_ratio_median,
            "magnitude_ratio_of_means": self.magnitude_ratio_of_means,
            "mean_mag_diff": self.mean_mag_diff,
            "mean_interaction": self.mean_interaction,
            "magdiff_vs_zero": None if self.magdiff_vs_zero is None else self.magdiff_vs_zero.to_record(),
        }


@dataclass
class CrossSubset:
    pathway: Pathway
    mean_ie: TestResult | None
    magdiff: TestResult | None
    polarity_flip: bool

    def to_record(self) -> dict:
        return {
            "pathway": self.pathway.value,
            "cross_subset_mean_ie": None if self.mean_ie is None else self.mean_ie.to_record(),
            "cross_subset_magdiff": None if self.magdiff is None else self.magdiff.to_record(),
            "polarity_flip": self.polarity_flip,
        }


@dataclass
class PathwayDiagnostics:
    cells: dict[tuple[Pathway, Outcome], CellDiagnostics]
    cross: dict[Pathway, CrossSubset] = field(default_factory=dict)

    def cell(self, pathway: Pathway, subset: Outcome) -> CellDiagnostics:
        return self.cells[(pathway, subset)]

    def to_records(self) -> list[dict]:
        out = []
        for p in Pathway:
            for s in SUBSETS:
                rec = self.cells[(p, s)].to_record()
                if p in self.cross:
                    rec.update({k: v for k, v in self.cross[p].to_record().items() if k != "pathway"})
                out.append(rec)
        return out


def _sample_mean_ie(row: CpaSampleRow) -> float:
    return float(np.mean(row.individual_ies))


def _cell(pathway: Pathway, subset: Outcome, rows: list[CpaSampleRow]) -> CellDiagnostics:
    if len(rows) < 2:
        return CellDiagnostics(pathway, subset, len(rows), available=False)
    ies = np.array([v for r in rows for v in r.individual_ies])
    ratios = [r.magnitude_ratio for r in rows]
    ratios = np.array([v for v in ratios if v is not None])
    md = np.array([r.mag_diff for r in rows])
    joint_abs = np.mean([abs(r.joint_ie) for r in rows])
    sum_abs = np.mean([sum(abs(v) for v in r.individual_ies) for r in rows])
    return CellDiagnostics(
        pathway, subset, len(rows),
        mean_individual_ie=float(ies.mean()),
        fraction_positive=float(np.mean(ies > 0.0)),
        magnitude_ratio=float(ratios.mean()) if len(ratios) else float("nan"),
        magnitude_ratio_median=float(np.median(ratios)) if len(ratios) else float("nan"),
        magnitude_ratio_of_means=float(joint_abs / sum_abs) if sum_abs > 0 else float("nan"),
        mean_mag_diff=float(md.mean()),
        mean_interaction=float(np.mean([r.interaction for r in rows])),
        magdiff_vs_zero=one_sample_t(md),
    )


def cpa_aggregate(rows: Sequence[CpaSampleRow], alpha: float = 0.05) -> PathwayDiagnostics:
    """Per (pathway, subset) cell statistics plus cross-subset tests.

    Cross-subset tests compare per-sample mean individual IEs (and MagDiff)
    between Correct and Hallucinating samples with Welch's test; the effect size
    is Cohen's d, Correct minus Hallucinating.
    """
    ordered = sorted(rows, key=lambda r: (r.sample_id, r.pathway.value))
    groups: dict[tuple[Pathway, Outcome], list[CpaSampleRow]] = {(p, s): [] for p in Pathway for s in SUBSETS}
    for r in ordered:
        if r.subset in SUBSETS:
            groups[(r.pathway, r.subset)].append(r)
    cells = {k: _cell(k[0], k[1], v) for k, v in groups.items()}
    cross = {}
    for p in Pathway:
        a, b = groups[(p, Outcome.CORRECT)], groups[(p, Outcome.HALLUCINATING)]
        if len(a) < 2 or len(b) < 2:
            continue
        t_ie = welch_t([_sample_mean_ie(r) for r in a], [_sample_mean_ie(r) for r in b])
        t_md = welch_t([r.mag_diff for r in a], [r.mag_diff for r in b])
        ma = cells[(p, Outcome.CORRECT)].mean_individual_ie
        mb = cells[(p, Outcome.HALLUCINATING)].mean_individual_ie
        flip = bool(np.sign(ma) * np.sign(mb) < 0 and t_ie.p_value < alpha)
        cross[p] = CrossSubset(p, t_ie, t_md, flip)
    return PathwayDiagnostics(cells, cross)


def cpa_rows(traces: Sequence[SampleTrace], joints: dict[Pathway, Sequence[JointTrace]],
             circuit: Circuit) -> list[CpaSampleRow]:
    """Rows for every non-Miss sample and every non-empty pathway, ordered by sample id."""
    out = []
    by_id = {p: {j.sample_id: j for j in js} for p, js in joints.items()}
    for t in sorted(traces, key=lambda t: t.sample_id):
        if t.outcome == Outcome.MISS:
            continue
        for p in Pathway:
            members = circuit.members(p)
            if not members:
                continue
            out.append(cpa_per_sample(t, by_id[p][t.sample_id], members, p))
    return out


def cross_subset_effect(diag: PathwayDiagnostics, pathway: Pathway) -> float | None:
    c = diag.cross.get(pathway)
    if c is None or c.mean_ie is None:
        return None
    return c.mean_ie.effect_size


__all__ = [
    "GROUNDING_F_POS_BAND", "CellDiagnostics", "ConsistencyError", "CpaSampleRow", "CrossSubset",
    "PathwayDiagnostics", "cpa_aggregate", "cpa_per_sample", "cpa_rows",
    "cross_subset_effect",
]
