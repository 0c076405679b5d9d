"""Clean / corrupt / patch passes and the indirect effects they define.

A sample is run three ways: clean, with Gaussian noise added to its layer-0
visual-token embeddings, and corrupted again with one or more components'
final-position outputs restored to their clean values. The noise realization
depends only on ``(noise_seed, sample_id)``, so every pass for a sample sees
the same corruption.

Patch passes resume from the corrupt run's residual at the first patched
layer; everything upstream of it is identical to the corrupt pass anyway.
Batches are formed across samples, and since every kernel acts per batch row
a sample's numbers never depend on its batch neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .toyvlm import (
    Answer,
    ComponentId,
    Outcome,
    TaskSample,
    ToyModel,
    answers,
    batch_deltas,
    embed,
    outcome_of,
    run_batch,
    visual_slice,
)

DEFAULT_EPSILON = 1e-3
DEFAULT_CHUNK = 200


class CalibrationError(RuntimeError):
    """Corrupt-run accuracy fell outside the accepted band."""

    def __init__(self, report: "CalibrationReport"):
        self.report = report
        super().__init__(
            f"corrupt accuracy {report.corrupt_accuracy:.4f} outside "
            f"[{report.band[0]}, {report.band[1]}]"
            + (" (constant-answer collapse)" if report.constant_answer else "")
        )


@dataclass(frozen=True)
class CorruptionSpec:
    noise_multiplier: float = 3.0
    noise_seed: int = 0

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ValueError("noise_multiplier must be non-negative")


@dataclass
class SampleTrace:
    sample_id: int
    outcome: Outcome
    delta_clean: float
    delta_corrupt: float
    delta_patched: dict[ComponentId, float]
    total_effect: float
    ground_truth: Answer = Answer.NO
    co_occurrence_score: float = 0.0

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "outcome": self.outcome.value,
            "ground_truth": self.ground_truth.name.lower(),
            "co_occurrence_score": self.co_occurrence_score,
            "delta_clean": self.delta_clean,
            "delta_corrupt": self.delta_corrupt,
            "total_effect": self.total_effect,
            "delta_patched": {str(c): v for c, v in sorted(self.delta_patched.items())},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SampleTrace":
        return cls(
            sample_id=int(rec["sample_id"]),
            outcome=Outcome(rec["outcome"]),
            delta_clean=float(rec["delta_clean"]),
            delta_corrupt=float(rec["delta_corrupt"]),
            delta_patched={ComponentId.parse(k): float(v) for k, v in rec["delta_patched"].items()},
            total_effect=float(rec["total_effect"]),
            ground_truth=Answer[rec.get("ground_truth", "no").upper()],
            co_occurrence_score=float(rec.get("co_occurrence_score", 0.0)),
        )


@dataclass
class JointTrace:
    sample_id: int
    pathway_components: tuple[ComponentId, ...]
    delta_joint: float
    delta_corrupt: float = 0.0

    def __post_init__(self):
        if not self.pathway_components:
            raise ValueError("pathway_components must be non-empty")

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "pathway_components": [str(c) for c in self.pathway_components],
            "delta_joint": self.delta_joint,
            "delta_corrupt": self.delta_corrupt,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "JointTrace":
        return cls(
            sample_id=int(rec["sample_id"]),
            pathway_components=tuple(ComponentId.parse(c) for c in rec["pathway_components"]),
            delta_joint=float(rec["delta_joint"]),
            delta_corrupt=float(rec["delta_corrupt"]),
        )


@dataclass
class CalibrationReport:
    n: int
    noise_multiplier: float
    clean_accuracy: float
    corrupt_accuracy: float
    corrupt_yes_rate: float
    constant_answer: bool
    band: tuple[float, float] = (0.45, 0.55)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.band[0] <= self.corrupt_accuracy <= self.band[1]

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "noise_multiplier": self.noise_multiplier,
            "clean_accuracy": self.clean_accuracy,
            "corrupt_accuracy": self.corrupt_accuracy,
            "corrupt_yes_rate": self.corrupt_yes_rate,
            "constant_answer": self.constant_answer,
            "passed": self.passed,
        }


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def corruption_noise(model: ToyModel, sample: TaskSample, clean_visual: np.ndarray,
                     spec: CorruptionSpec) -> np.ndarray:
    """Noise for one sample's visual block; depends only on (noise_seed, sample_id)."""
    rng = np.random.default_rng([spec.noise_seed, sample.sample_id])
    std = spec.noise_multiplier * float(clean_visual.std())
    return rng.normal(0.0, 1.0, size=clean_visual.shape) * std


def corrupt_embeddings(model: ToyModel, samples: Sequence[TaskSample], spec: CorruptionSpec,
                       clean: np.ndarray | None = None) -> np.ndarray:
    """Layer-0 residual with noise on the visual-token block, shape (B, S, W)."""
    x = embed(model, samples) if clean is None else clean
    out = x.copy()
    vs = visual_slice(model)
    for i, s in enumerate(samples):
        out[i, vs] = x[i, vs] + corruption_noise(model, s, x[i, vs], spec)
    return out


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------


@dataclass
class _Base:
    """Clean and corrupt passes for a chunk of samples."""

    samples: Sequence[TaskSample]
    clean_logits: np.ndarray
    corrupt_logits: np.ndarray
    clean_final: np.ndarray  # (B, depth, 2, W)
    clean_full: dict[ComponentId, np.ndarray]  # only filled for all-position patching
    corrupt_resid: np.ndarray  # (B, depth + 1, S, W)


def _capture_full(model: ToyModel, x0: np.ndarray, comps: Iterable[ComponentId]) -> dict:
    want = set(comps)
    got: dict[ComponentId, np.ndarray] = {}

    def hook(cid, out):
        if cid in want:
            got[cid] = out.copy()
        return out

    run_batch(model, x0, site_hook=hook)
    return got


def _base(model: ToyModel, samples: Sequence[TaskSample], spec: CorruptionSpec,
          all_positions: bool, comps: Iterable[ComponentId]) -> _Base:
    x0 = embed(model, samples)
    clean = run_batch(model, x0, record=True)
    xc = corrupt_embeddings(model, samples, spec, clean=x0)
    corrupt = run_batch(model, xc, record=True)
    full = _capture_full(model, x0, comps) if all_positions else {}
    return _Base(samples, clean.logits, corrupt.logits, clean.comp_final, full, corrupt.resid)


def _patched_logits(model: ToyModel, base: _Base, pathway: Sequence[ComponentId],
                    all_positions: bool) -> np.ndarray:
    start = min(c.layer for c in pathway)
    targets = set(pathway)

    def hook(cid, out):
        if cid not in targets:
            return out
        out = out.copy()
        if all_positions:
            out[:] = base.clean_full[cid]
        else:
            out[:, -1] = base.clean_final[:, cid.layer, int(cid.kind)]
        return out

    x = base.corrupt_resid[:, start]
    return run_batch(model, x, site_hook=hook, start_layer=start).logits


def _check(model: ToyModel, comps: Iterable[ComponentId]) -> list[ComponentId]:
    out = sorted(set(comps))
    for c in out:
        model.check_component(c)
    return out


def _chunks(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def run_traces(model: ToyModel, samples: Sequence[TaskSample], spec: CorruptionSpec,
               components: Iterable[ComponentId] | None = None, all_positions: bool = False,
               chunk: int = DEFAULT_CHUNK) -> list[SampleTrace]:
    """Single-component patch traces for many samples, in input order."""
    comps = _check(model, model.components if components is None else components)
    out: list[SampleTrace] = []
    for part in _chunks(list(samples), chunk):
        base = _base(model, part, spec, all_positions, comps)
        d_clean = batch_deltas(base.clean_logits, part)
        d_corrupt = batch_deltas(base.corrupt_logits, part)
        patched = {c: batch_deltas(_patched_logits(model, base, [c], all_positions), part) for c in comps}
        ans = answers(base.clean_logits)
        for i, s in enumerate(part):
            dc, dx = float(d_clean[i]), float(d_corrupt[i])
            out.append(SampleTrace(
                sample_id=s.sample_id,
                outcome=outcome_of(Answer(int(ans[i])), s.ground_truth),
                delta_clean=dc,
                delta_corrupt=dx,
                delta_patched={c: float(patched[c][i]) for c in comps},
                total_effect=dc - dx,
                ground_truth=s.ground_truth,
                co_occurrence_score=s.co_occurrence_score,
            ))
    return out


def run_trace(model: ToyModel, sample: TaskSample, spec: CorruptionSpec,
              components: Iterable[ComponentId] = (), all_positions: bool = False) -> SampleTrace:
    """One clean pass, one corrupt pass, and one patch pass per component."""
    return run_traces(model, [sample], spec, list(components), all_positions)[0]


def run_joints(model: ToyModel, samples: Sequence[TaskSample], spec: CorruptionSpec,
               pathway: Iterable[ComponentId], all_positions: bool = False,
               chunk: int = DEFAULT_CHUNK) -> list[JointTrace]:
    """Restore every pathway component at once, for many samples."""
    comps = _check(model, pathway)
    if not comps:
        raise ValueError("pathway must be non-empty")
    out: list[JointTrace] = []
    for part in _chunks(list(samples), chunk):
        base = _base(model, part, spec, all_positions, comps)
        d_corrupt = batch_deltas(base.corrupt_logits, part)
        joint = batch_deltas(_patched_logits(model, base, comps, all_positions), part)
        for i, s in enumerate(part):
            out.append(JointTrace(s.sample_id, tuple(comps), float(joint[i]), float(d_corrupt[i])))
    return out


def run_joint(model: ToyModel, sample: TaskSample, spec: CorruptionSpec,
              pathway: Iterable[ComponentId], all_positions: bool = False) -> JointTrace:
    return run_joints(model, [sample], spec, pathway, all_positions)[0]


# ---------------------------------------------------------------------------
# effects
# ---------------------------------------------------------------------------


def indirect_effect(trace: SampleTrace, c: ComponentId) -> float:
    """IE(c) = delta_patched[c] - delta_corrupt; raises KeyError if c was not patched."""
    return trace.delta_patched[c] - trace.delta_corrupt


def normalized_ie(trace: SampleTrace, c: ComponentId, epsilon: float = DEFAULT_EPSILON) -> float | None:
    """IE(c) / TE, or ``None`` when |TE| <= epsilon (sample flagged and excluded)."""
    ie = indirect_effect(trace, c)
    if abs(trace.total_effect) <= epsilon:
        return None
    return ie / trace.total_effect


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def calibrate_noise(model: ToyModel, samples: Sequence[TaskSample], spec: CorruptionSpec,
                    band: tuple[float, float] = (0.45, 0.55), strict: bool = False,
                    chunk: int = DEFAULT_CHUNK) -> CalibrationReport:
    """Measure accuracy under corruption; ``strict`` raises when out of band."""
    if len(samples) < 100:
        raise ValueError("calibration needs at least 100 samples")
    truth = np.array([int(s.ground_truth) for s in samples])
    clean_ans, corrupt_ans = [], []
    for part in _chunks(list(samples), chunk):
        x0 = embed(model, part)
        clean_ans.append(answers(run_batch(model, x0).logits))
        corrupt_ans.append(answers(run_batch(model, corrupt_embeddings(model, part, spec, clean=x0)).logits))
    ca = np.concatenate(clean_ans)
    xa = np.concatenate(corrupt_ans)
    yes = float(np.mean(xa == int(Answer.YES)))
    report = CalibrationReport(
        n=len(samples),
        noise_multiplier=spec.noise_multiplier,
        clean_accuracy=float(np.mean(ca == truth)),
        corrupt_accuracy=float(np.mean(xa == truth)),
        corrupt_yes_rate=yes,
        constant_answer=yes in (0.0, 1.0),
        band=band,
    )
    if strict and not report.passed:
        raise CalibrationError(report)
    return report


def is_finite_trace(trace: SampleTrace) -> bool:
    vals = [trace.delta_clean, trace.delta_corrupt, *trace.delta_patched.values()]
    return all(math.isfinite(v) for v in vals)
