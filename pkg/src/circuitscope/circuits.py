"""Circuit extraction from patching traces, threshold sensitivity, and
cross-architecture comparison of extracted circuits.

A component joins the circuit when its normalized indirect effect differs
between correctly answered and hallucinated samples (Welch t-test, BH-adjusted
over every component of the model) with a large enough effect size. The sign
of Cohen's d (correct minus hallucinating) assigns the pathway.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .patchengine import DEFAULT_EPSILON, SampleTrace, normalized_ie
from .statkit import (
    TestResult,
    UndefinedCorrelation,
    bh_adjust,
    fisher_exact,
    normal_cdf,
    pearson_r,
    tost_equivalence,
    welch_t,
)
from .toyvlm import ComponentId, Outcome

GRID_POINTS = 50
DEFAULT_D_GRID = (0.25, 0.30, 0.35)


class ExtractionError(ValueError):
    """Not enough samples in a group to test."""


class Pathway(str, enum.Enum):
    GROUNDING = "grounding"
    HALLUCINATION = "hallucination"


@dataclass(frozen=True)
class ComponentStat:
    component: ComponentId
    cohens_d: float
    p_raw: float
    p_adjusted: float
    mean_ie_correct: float
    mean_ie_halluc: float
    n_correct: int
    n_halluc: int
    statistic: float = 0.0
    df: float | None = None

    def to_record(self) -> dict:
        return {
            "component": str(self.component),
            "cohens_d": self.cohens_d,
            "p_raw": self.p_raw,
            "p_adjusted": self.p_adjusted,
            "mean_ie_correct": self.mean_ie_correct,
            "mean_ie_halluc": self.mean_ie_halluc,
            "n_correct": self.n_correct,
            "n_halluc": self.n_halluc,
            "statistic": self.statistic,
            "df": self.df,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ComponentStat":
        return cls(
            component=ComponentId.parse(rec["component"]),
            cohens_d=float(rec["cohens_d"]),
            p_raw=float(rec["p_raw"]),
            p_adjusted=float(rec["p_adjusted"]),
            mean_ie_correct=float(rec["mean_ie_correct"]),
            mean_ie_halluc=float(rec["mean_ie_halluc"]),
            n_correct=int(rec["n_correct"]),
            n_halluc=int(rec["n_halluc"]),
            statistic=float(rec.get("statistic", 0.0)),
            df=None if rec.get("df") is None else float(rec["df"]),
        )


@dataclass
class Circuit:
    model_id: str
    depth: int
    components: list[ComponentStat]  # members only, ordered by component
    pathway: dict[ComponentId, Pathway]
    alpha: float = 0.05
    d_min: float = 0.3
    all_stats: list[ComponentStat] = field(default_factory=list)
    n_excluded: int = 0
    n_miss: int = 0

    def members(self, pathway: Pathway | None = None) -> list[ComponentId]:
        return sorted(c for c, p in self.pathway.items() if pathway is None or p == pathway)

    @property
    def grounding(self) -> list[ComponentId]:
        return self.members(Pathway.GROUNDING)

    @property
    def hallucination(self) -> list[ComponentId]:
        return self.members(Pathway.HALLUCINATION)

    def stat(self, c: ComponentId) -> ComponentStat:
        for s in self.all_stats:
            if s.component == c:
                return s
        raise KeyError(c)

    @property
    def is_empty(self) -> bool:
        return not self.pathway


def _group_values(traces: Sequence[SampleTrace], epsilon: float) -> tuple[list[SampleTrace], list[SampleTrace], int, int]:
    correct, halluc = [], []
    excluded = miss = 0
    for t in traces:
        if t.outcome == Outcome.MISS:
            miss += 1
            continue
        if abs(t.total_effect) <= epsilon:
            excluded += 1
            continue
        (correct if t.outcome == Outcome.CORRECT else halluc).append(t)
    return correct, halluc, excluded, miss


def component_stats(traces: Sequence[SampleTrace], alpha: float = 0.05,
                    epsilon: float = DEFAULT_EPSILON,
                    components: Iterable[ComponentId] | None = None) -> tuple[list[ComponentStat], int, int]:
    """Welch test and Cohen's d per component, with BH adjustment over all of them.

    Returns the statistics (ordered by component), the number of samples
    excluded for |TE| <= epsilon, and the number of Miss samples.
    """
    traces = sorted(traces, key=lambda t: t.sample_id)
    correct, halluc, excluded, miss = _group_values(traces, epsilon)
    if len(correct) < 2:
        raise ExtractionError(f"need at least 2 Correct samples, have {len(correct)}")
    if len(halluc) < 2:
        raise ExtractionError(f"need at least 2 Hallucinating samples, have {len(halluc)}")
    if components is None:
        comps = sorted(set().union(*(t.delta_patched.keys() for t in traces)))
    else:
        comps = sorted(set(components))
    raw = []
    for c in comps:
        a = np.array([normalized_ie(t, c, epsilon) for t in correct])
        b = np.array([normalized_ie(t, c, epsilon) for t in halluc])
        res = welch_t(a, b)
        raw.append((c, res, float(a.mean()), float(b.mean()), len(a), len(b)))
    fdr = bh_adjust([r[1].p_value for r in raw], alpha)
    out = [
        ComponentStat(c, float(res.effect_size), res.p_value, float(adj), ma, mb, na, nb,
                      float(res.statistic), res.df)
        for (c, res, ma, mb, na, nb), adj in zip(raw, fdr.adjusted_p)
    ]
    return out, excluded, miss


def select_members(stats: Sequence[ComponentStat], alpha: float, d_min: float) -> dict[ComponentId, Pathway]:
    out = {}
    for s in stats:
        if s.p_adjusted < alpha and abs(s.cohens_d) > d_min:
            out[s.component] = Pathway.GROUNDING if s.cohens_d > 0 else Pathway.HALLUCINATION
    return out


def circuit_from_stats(stats: Sequence[ComponentStat], model_id: str, depth: int,
                       alpha: float = 0.05, d_min: float = 0.3,
                       n_excluded: int = 0, n_miss: int = 0) -> Circuit:
    pathway = select_members(stats, alpha, d_min)
    members = [s for s in stats if s.component in pathway]
    return Circuit(model_id, depth, members, pathway, alpha, d_min, list(stats), n_excluded, n_miss)


def extract_circuit(traces: Sequence[SampleTrace], alpha: float = 0.05, d_min: float = 0.3,
                    model_id: str = "", depth: int | None = None,
                    epsilon: float = DEFAULT_EPSILON,
                    components: Iterable[ComponentId] | None = None) -> Circuit:
    stats, excluded, miss = component_stats(traces, alpha, epsilon, components)
    if depth is None:
        depth = max(s.component.layer for s in stats) + 1
    return circuit_from_stats(stats, model_id, depth, alpha, d_min, excluded, miss)


# ---------------------------------------------------------------------------
# threshold sensitivity
# ---------------------------------------------------------------------------


def jaccard(a: Iterable, b: Iterable) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


@dataclass
class SensitivityReport:
    reference_d: float
    circuits: dict[float, Circuit]
    jaccard: dict[float, dict[Pathway, float]]
    retains_five: bool
    nested: bool

    def to_records(self) -> list[dict]:
        rows = []
        for d, circ in sorted(self.circuits.items()):
            rows.append({
                "d_min": d,
                "n_grounding": len(circ.grounding),
                "n_hallucination": len(circ.hallucination),
                "jaccard_grounding": self.jaccard[d][Pathway.GROUNDING],
                "jaccard_hallucination": self.jaccard[d][Pathway.HALLUCINATION],
            })
        return rows


def sensitivity_from_stats(stats: Sequence[ComponentStat], model_id: str, depth: int,
                           alpha: float = 0.05, d_grid: Sequence[float] = DEFAULT_D_GRID,
                           reference_d: float = 0.30) -> SensitivityReport:
    grid = sorted(set(d_grid) | {reference_d})
    circuits = {d: circuit_from_stats(stats, model_id, depth, alpha, d) for d in grid}
    ref = circuits[reference_d]
    jac = {d: {p: jaccard(c.members(p), ref.members(p)) for p in Pathway} for d, c in circuits.items()}
    retains = all(len(c.grounding) >= 5 and len(c.hallucination) >= 5 for c in circuits.values())
    nested = all(
        set(circuits[hi].pathway.items()) <= set(circuits[lo].pathway.items())
        for lo, hi in zip(grid, grid[1:])
    )
    return SensitivityReport(reference_d, circuits, jac, retains, nested)


def threshold_sensitivity(traces: Sequence[SampleTrace], alpha: float = 0.05,
                          d_grid: Sequence[float] = DEFAULT_D_GRID, reference_d: float = 0.30,
                          model_id: str = "", depth: int | None = None,
                          epsilon: float = DEFAULT_EPSILON) -> SensitivityReport:
    stats, _, _ = component_stats(traces, alpha, epsilon)
    if depth is None:
        depth = max(s.component.layer for s in stats) + 1
    return sensitivity_from_stats(stats, model_id, depth, alpha, d_grid, reference_d)


# ---------------------------------------------------------------------------
# cross-architecture comparison
# ---------------------------------------------------------------------------


def relative_depth(layer: int, model_depth: int) -> float:
    if model_depth < 2:
        raise ValueError("model_depth must be >= 2")
    return layer / (model_depth - 1)


def grid_index(depth: float, n_grid: int = GRID_POINTS) -> int:
    return int(math.floor(depth * (n_grid - 1) + 0.5))


@dataclass
class DepthProfile:
    model_id: str
    depths: dict[ComponentId, float]
    profile: np.ndarray  # members' d on the grid, non-members zero
    profile_all: np.ndarray  # every component's d on the grid

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "depths": {str(c): v for c, v in sorted(self.depths.items())},
            "profile": self.profile.tolist(),
            "profile_all": self.profile_all.tolist(),
        }


def _resample(values: dict[ComponentId, float], depths: dict[ComponentId, float], n_grid: int) -> np.ndarray:
    sums = np.zeros(n_grid)
    counts = np.zeros(n_grid)
    for c, v in sorted(values.items()):
        k = grid_index(depths[c], n_grid)
        sums[k] += v
        counts[k] += 1
    out = np.zeros(n_grid)
    hit = counts > 0
    out[hit] = sums[hit] / counts[hit]
    return out


def depth_normalize(circuit: Circuit, model_depth: int | None = None, n_grid: int = GRID_POINTS) -> DepthProfile:
    """Place effect sizes on a common relative-depth grid (nearest point, collisions averaged)."""
    model_depth = circuit.depth if model_depth is None else model_depth
    stats = circuit.all_stats or circuit.components
    depths = {s.component: relative_depth(s.component.layer, model_depth) for s in stats}
    members = {s.component: s.cohens_d for s in stats if s.component in circuit.pathway}
    every = {s.component: s.cohens_d for s in stats}
    return DepthProfile(circuit.model_id, depths, _resample(members, depths, n_grid),
                        _resample(every, depths, n_grid))


@dataclass
class MacroComparison:
    table: list[list[int]] | None
    result: TestResult | None
    notice: str = ""

    @property
    def shared_pattern(self) -> bool | None:
        return None if self.result is None else self.result.p_value > 0.05


def early_late_counts(circuit: Circuit) -> tuple[int, int]:
    early = late = 0
    for c in circuit.hallucination:
        if relative_depth(c.layer, circuit.depth) <= 0.5:
            early += 1
        else:
            late += 1
    return early, late


def macro_compare(circuit_a: Circuit, circuit_b: Circuit) -> MacroComparison:
    """Fisher test on (model) x (early / late hallucination-pathway component counts)."""
    if not circuit_a.hallucination or not circuit_b.hallucination:
        who = circuit_a.model_id if not circuit_a.hallucination else circuit_b.model_id
        return MacroComparison(None, None, f"comparison skipped: empty hallucination pathway in {who}")
    table = [list(early_late_counts(circuit_a)), list(early_late_counts(circuit_b))]
    return MacroComparison(table, fisher_exact(table))


class Verdict(str, enum.Enum):
    NEGLIGIBLE = "Negligible"
    INCONCLUSIVE = "Inconclusive"
    CORRELATED = "Correlated"


@dataclass
class MicroComparison:
    r: float | None
    result: TestResult | None
    verdict: Verdict | None
    ci: tuple[float, float] | None
    notice: str = ""


def correlation_ci(r: float, n: int, level: float = 0.95) -> tuple[float, float]:
    if abs(r) >= 1.0:
        return (r, r)
    z = math.atanh(r)
    se = 1.0 / math.sqrt(n - 3)
    # two-sided normal quantile by bisection on the stdlib-based CDF
    target = 0.5 + level / 2.0
    lo, hi = 0.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    return (math.tanh(z - q * se), math.tanh(z + q * se))


def micro_compare(profile_a: np.ndarray, profile_b: np.ndarray, bound: float = 0.3,
                  alpha: float = 0.05) -> MicroComparison:
    """Pearson r between profiles plus a TOST verdict.

    Negligible: TOST equivalence at ``alpha``. Correlated: the 95% interval for
    r lies entirely outside [-bound, bound]. Otherwise Inconclusive.
    """
    a = np.asarray(profile_a, dtype=float)
    b = np.asarray(profile_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("profiles must share a grid")
    try:
        r = pearson_r(a, b)
    except UndefinedCorrelation as exc:
        return MicroComparison(None, None, None, None, f"correlation undefined: {exc}")
    res = tost_equivalence(r, len(a), bound)
    ci = correlation_ci(r, len(a), 1.0 - alpha)
    if res.p_value < alpha:
        verdict = Verdict.NEGLIGIBLE
    elif ci[0] > bound or ci[1] < -bound:
        verdict = Verdict.CORRELATED
    else:
        verdict = Verdict.INCONCLUSIVE
    return MicroComparison(r, res, verdict, ci)


@dataclass
class PairComparison:
    model_a: str
    model_b: str
    macro: MacroComparison
    micro: MicroComparison
    micro_all: MicroComparison

    def to_record(self) -> dict:
        def micro(m: MicroComparison) -> dict:
            return {
                "r": m.r,
                "tost_p": None if m.result is None else m.result.p_value,
                "ci_low": None if m.ci is None else m.ci[0],
                "ci_high": None if m.ci is None else m.ci[1],
                "verdict": None if m.verdict is None else m.verdict.value,
                "notice": m.notice,
            }

        return {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "fisher_table": self.macro.table,
            "fisher_p": None if self.macro.result is None else self.macro.result.p_value,
            "macro_notice": self.macro.notice,
            "micro": micro(self.micro),
            "micro_all_components": micro(self.micro_all),
        }


def compare_all(circuits: Sequence[Circuit], n_grid: int = GRID_POINTS, bound: float = 0.3) -> list[PairComparison]:
    """Every unordered pair of circuits, in input order."""
    profiles = [depth_normalize(c, n_grid=n_grid) for c in circuits]
    out = []
    for i, j in combinations(range(len(circuits)), 2):
        ca, cb = circuits[i], circuits[j]
        out.append(PairComparison(
            ca.model_id, cb.model_id,
            macro_compare(ca, cb),
            micro_compare(profiles[i].profile, profiles[j].profile, bound),
            micro_compare(profiles[i].profile_all, profiles[j].profile_all, bound),
        ))
    return out
