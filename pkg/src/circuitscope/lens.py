"""Logit lens: decode intermediate residual states through the final norm and unembedding.

Layer-membership rule for the pathway-grouped comparison: a layer belongs to a
pathway's layer set when either of its two components is a member, so a layer
holding one grounding and one hallucination component counts for both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .circuits import Circuit, Pathway
from .statkit import TestResult, welch_t
from .toyvlm import NO, YES, Answer, Outcome, TaskSample, ToyModel, answers, embed, outcome_of, rms_norm, run_batch

MIXED_LAYER_NOTE = "layers holding members of both pathways count toward both groups"


@dataclass
class LensTrajectory:
    sample_id: int
    outcome: Outcome
    logit_diff: np.ndarray  # (depth + 1,), index 0 is the embedding output
    per_layer_delta: np.ndarray  # (depth,)

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "outcome": self.outcome.value,
            "logit_diff": self.logit_diff.tolist(),
            "per_layer_delta": self.per_layer_delta.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LensTrajectory":
        return cls(int(rec["sample_id"]), Outcome(rec["outcome"]),
                   np.array(rec["logit_diff"], dtype=float), np.array(rec["per_layer_delta"], dtype=float))


def lens_trajectories(model: ToyModel, samples: Sequence[TaskSample], chunk: int = 200) -> list[LensTrajectory]:
    """Clean-pass trajectories for many samples, in input order."""
    out = []
    for i in range(0, len(samples), chunk):
        part = list(samples[i:i + chunk])
        run = run_batch(model, embed(model, part), record=True)
        states = run.resid[:, :, -1]  # (B, depth + 1, W)
        logits = rms_norm(states, model.ln_f) @ model.unembed[[YES, NO]].T  # (B, depth + 1, 2)
        ans = answers(run.logits)
        for b, s in enumerate(part):
            sign = 1.0 if s.ground_truth == Answer.YES else -1.0
            diff = sign * (logits[b, :, 0] - logits[b, :, 1])
            out.append(LensTrajectory(s.sample_id, outcome_of(Answer(int(ans[b])), s.ground_truth),
                                      diff, np.diff(diff)))
    return out


def lens_trajectory(model: ToyModel, sample: TaskSample) -> LensTrajectory:
    return lens_trajectories(model, [sample])[0]


def pathway_layers(circuit: Circuit, pathway: Pathway) -> list[int]:
    return sorted({c.layer for c in circuit.members(pathway)})


@dataclass
class DifferentialRow:
    subset: Outcome
    n: int
    grounding_mean: float | None
    halluc_mean: float | None
    result: TestResult | None
    notice: str = ""

    def to_record(self) -> dict:
        return {
            "subset": self.subset.value,
            "n": self.n,
            "grounding_delta": self.grounding_mean,
            "halluc_delta": self.halluc_mean,
            "cohens_d": None if self.result is None else self.result.effect_size,
            "p_value": None if self.result is None else self.result.p_value,
            "notice": self.notice,
        }


@dataclass
class DifferentialReport:
    grounding_layers: list[int]
    halluc_layers: list[int]
    rows: list[DifferentialRow]
    note: str = MIXED_LAYER_NOTE


def _differential(trajs: Sequence[LensTrajectory], g_layers: list[int], h_layers: list[int],
                  subset: Outcome) -> DifferentialRow:
    if not g_layers or not h_layers:
        missing = "grounding" if not g_layers else "hallucination"
        return DifferentialRow(subset, len(trajs), None, None, None, f"no layers assigned to the {missing} pathway")
    if len(trajs) < 2:
        return DifferentialRow(subset, len(trajs), None, None, None, "fewer than 2 samples")
    g = np.array([t.per_layer_delta[g_layers].mean() for t in trajs])
    h = np.array([t.per_layer_delta[h_layers].mean() for t in trajs])
    return DifferentialRow(subset, len(trajs), float(g.mean()), float(h.mean()), welch_t(g, h))


def lens_differential(trajectories: Sequence[LensTrajectory], circuit: Circuit,
                      subsets: Sequence[Outcome] = (Outcome.CORRECT, Outcome.HALLUCINATING)) -> DifferentialReport:
    """Grouped per-layer deltas (grounding layers vs hallucination layers), one row per subset.

    Each sample contributes its mean delta over each layer group; the groups
    are compared with Welch's test and Cohen's d (grounding minus hallucination).
    """
    g_layers = pathway_layers(circuit, Pathway.GROUNDING)
    h_layers = pathway_layers(circuit, Pathway.HALLUCINATION)
    ordered = sorted(trajectories, key=lambda t: t.sample_id)
    rows = [_differential([t for t in ordered if t.outcome == s], g_layers, h_layers, s) for s in subsets]
    return DifferentialReport(g_layers, h_layers, rows)


def mean_delta_by_layer(trajectories: Sequence[LensTrajectory]) -> np.ndarray:
    return np.mean([t.per_layer_delta for t in trajectories], axis=0)
