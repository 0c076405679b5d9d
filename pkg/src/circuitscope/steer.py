"""Inference-time interventions on circuit components and attention heads.

Scaling and projection act on a component's output at every position of
every forward pass. Probe-based steering adds ``alpha * sigma * w_hat`` to a
head's pre-output-projection activation at the final position only.

Plans are chosen on a selection set and scored on a disjoint evaluation set:
minimize hallucination rate subject to an accuracy budget, then maximize
accuracy, then prefer the mildest setting (largest s, smallest |alpha|), then
the lexicographically smallest plan id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .circuits import Circuit
from .statkit import FitError, ProbeModel, fit_logistic
from .toyvlm import (
    AddressingError,
    Answer,
    ComponentId,
    ForwardRecord,
    HeadHook,
    Outcome,
    SiteHook,
    TaskSample,
    ToyModel,
    answers,
    embed,
    forward_from,
    outcome_of,
    run_batch,
)

S_GRID = (0.0, 0.25, 0.5, 0.75)
K_GRID = (3, 5, 8, 10, 15, 20, 30)
PROJECTION_ALPHAS = (-1.5, -1.0, -0.5, 0.5, 1.0, 1.5)
ITI_ALPHAS = (-20.0, -15.0, -10.0, -5.0, 5.0, 10.0, 15.0, 20.0)
ITI_HEAD_COUNTS = (12, 24, 48, 96)
RANDOM_SEEDS = 5
BUDGET_PP = 2.0
# Real-model relative hallucination reduction under uniform scaling, shown as context.
REDUCTION_BAND = (0.40, 0.76)


class PlanError(ValueError):
    """Plan inconsistent with its mode or missing a fitted direction."""


class Mode(str, enum.Enum):
    UNIFORM_SCALE = "UniformScale"
    TOPK_SCALE = "TopKScale"
    MEAN_DIFF_PROJECTION = "MeanDiffProjection"
    PROBE_ITI = "ProbeIti"
    RANDOM_CONTROL = "RandomControl"
    GROUNDING_SUPPRESSION = "GroundingSuppression"


SCALING_MODES = (Mode.UNIFORM_SCALE, Mode.TOPK_SCALE, Mode.RANDOM_CONTROL, Mode.GROUNDING_SUPPRESSION)


@dataclass(frozen=True)
class HeadId:
    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}.h{self.head}"

    @classmethod
    def parse(cls, text: str) -> "HeadId":
        layer, head = text.split(".")
        return cls(int(layer[1:]), int(head[1:]))


@dataclass(frozen=True)
class InterventionPlan:
    mode: Mode
    targets: tuple = ()
    s: float | None = None
    k: int | None = None
    alpha: float | None = None
    K: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.mode in SCALING_MODES:
            if self.s is None or not 0.0 <= self.s <= 1.0:
                raise PlanError(f"{self.mode.value} needs s in [0, 1]")
        elif self.alpha is None:
            raise PlanError(f"{self.mode.value} needs alpha")
        if self.mode == Mode.TOPK_SCALE and self.k is None:
            raise PlanError("TopKScale needs k")
        if self.mode == Mode.PROBE_ITI and self.K is None:
            raise PlanError("ProbeIti needs K")
        if self.mode == Mode.RANDOM_CONTROL and self.seed is None:
            raise PlanError("RandomControl needs a seed")

    @property
    def plan_id(self) -> str:
        parts = [self.mode.value]
        if self.k is not None:
            parts.append(f"k={self.k:02d}")
        if self.K is not None:
            parts.append(f"K={self.K:03d}")
        if self.s is not None:
            parts.append(f"s={self.s:.2f}")
        if self.alpha is not None:
            parts.append(f"alpha={self.alpha:+06.2f}")
        if self.seed is not None:
            parts.append(f"seed={self.seed}")
        return "|".join(parts)

    @property
    def strength(self) -> float:
        """Distance from the identity; smaller is milder."""
        if self.mode in SCALING_MODES:
            return 1.0 - self.s
        return abs(self.alpha)

    @property
    def is_identity(self) -> bool:
        if not self.targets:
            return True
        return self.s == 1.0 if self.mode in SCALING_MODES else self.alpha == 0.0

    def to_record(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "mode": self.mode.value,
            "targets": [str(t) for t in self.targets],
            "s": self.s,
            "k": self.k,
            "alpha": self.alpha,
            "K": self.K,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SteerDirection:
    component: ComponentId | HeadId
    direction: np.ndarray
    sigma: float = 0.0
    validation_accuracy: float | None = None

    def __post_init__(self):
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, got norm {norm}")

    def to_record(self) -> dict:
        return {
            "target": str(self.component),
            "direction": self.direction.tolist(),
            "sigma": self.sigma,
            "validation_accuracy": self.validation_accuracy,
        }


# ---------------------------------------------------------------------------
# hooks
# ---------------------------------------------------------------------------


def _check_targets(model: ToyModel, plan: InterventionPlan) -> None:
    for t in plan.targets:
        if isinstance(t, HeadId):
            model.check_head(t.layer, t.head)
        elif isinstance(t, ComponentId):
            model.check_component(t)
        else:
            raise AddressingError(f"unknown target {t!r}")


def plan_callbacks(model: ToyModel, plan: InterventionPlan,
                   directions: Mapping | None = None) -> tuple[SiteHook | None, HeadHook | None]:
    """Batch callbacks implementing ``plan``; ``(None, None)`` for identity plans."""
    _check_targets(model, plan)
    if plan.is_identity:
        return None, None
    directions = directions or {}
    if plan.mode in SCALING_MODES:
        targets = set(plan.targets)
        s = plan.s

        def scale(cid, out):
            return out * s if cid in targets else out

        return scale, None
    missing = [str(t) for t in plan.targets if t not in directions]
    if missing:
        raise PlanError(f"no fitted direction for {', '.join(missing)}")
    alpha = plan.alpha
    if plan.mode == Mode.MEAN_DIFF_PROJECTION:
        dirs = {t: directions[t].direction for t in plan.targets}

        def project(cid, out):
            d = dirs.get(cid)
            if d is None:
                return out
            return out - alpha * (out @ d)[..., None] * d

        return project, None
    if plan.mode == Mode.PROBE_ITI:
        by_layer: dict[int, list[tuple[int, np.ndarray]]] = {}
        for t in sorted(plan.targets, key=lambda h: (h.layer, h.head)):
            sd = directions[t]
            by_layer.setdefault(t.layer, []).append((t.head, alpha * sd.sigma * sd.direction))

        def shift(layer, z):
            adds = by_layer.get(layer)
            if not adds:
                return z
            z = z.copy()
            for h, vec in adds:
                z[:, h, -1] += vec
            return z

        return None, shift
    raise PlanError(f"unsupported mode {plan.mode}")


def _single(model: ToyModel, plan: InterventionPlan, sample: TaskSample, directions=None) -> ForwardRecord:
    site, head = plan_callbacks(model, plan, directions)
    return forward_from(model, sample, embed(model, [sample]), site, head)


def apply_scaling(model: ToyModel, plan: InterventionPlan, sample: TaskSample) -> ForwardRecord:
    if plan.mode not in SCALING_MODES:
        raise PlanError(f"{plan.mode.value} is not a scaling plan")
    return _single(model, plan, sample)


def apply_projection(model: ToyModel, plan: InterventionPlan, directions: Mapping,
                     sample: TaskSample) -> ForwardRecord:
    if plan.mode != Mode.MEAN_DIFF_PROJECTION:
        raise PlanError(f"{plan.mode.value} is not a projection plan")
    return _single(model, plan, sample, directions)


def apply_iti(model: ToyModel, plan: InterventionPlan, probes: Mapping, sample: TaskSample) -> ForwardRecord:
    if plan.mode != Mode.PROBE_ITI:
        raise PlanError(f"{plan.mode.value} is not a probe-steering plan")
    return _single(model, plan, sample, probes)


def is_degenerate(model: ToyModel, plan: InterventionPlan) -> bool:
    """Scaling every component to zero leaves only the embedding path."""
    return plan.mode in SCALING_MODES and plan.s == 0.0 and set(plan.targets) >= set(model.components)


# ---------------------------------------------------------------------------
# activations and directions
# ---------------------------------------------------------------------------


@dataclass
class Activations:
    """Clean final-position activations for a set of samples."""

    sample_ids: np.ndarray
    outcomes: list[Outcome]
    components: np.ndarray  # (n, depth, 2, W)
    heads: np.ndarray  # (n, depth, H, dh)

    def component(self, c: ComponentId) -> np.ndarray:
        return self.components[:, c.layer, int(c.kind)]

    def mask(self, outcome: Outcome) -> np.ndarray:
        return np.array([o == outcome for o in self.outcomes], dtype=bool)


def capture_activations(model: ToyModel, samples: Sequence[TaskSample], chunk: int = 200) -> Activations:
    comps, heads, outs = [], [], []
    for i in range(0, len(samples), chunk):
        part = list(samples[i:i + chunk])
        run = run_batch(model, embed(model, part), record=True)
        comps.append(run.comp_final)
        heads.append(run.heads_final)
        outs += [outcome_of(Answer(int(a)), s.ground_truth) for s, a in zip(part, answers(run.logits))]
    return Activations(np.array([s.sample_id for s in samples], dtype=np.int64), outs,
                       np.concatenate(comps), np.concatenate(heads))


def mean_difference(correct: np.ndarray, halluc: np.ndarray) -> np.ndarray | None:
    """normalize(mean(halluc) - mean(correct)), or None for a zero difference."""
    diff = np.asarray(halluc, dtype=float).mean(axis=0) - np.asarray(correct, dtype=float).mean(axis=0)
    norm = float(np.linalg.norm(diff))
    if norm == 0.0 or not np.isfinite(norm):
        return None
    return diff / norm


def fit_mean_diff_directions(activations: Activations, targets: Iterable[ComponentId]) -> dict[ComponentId, SteerDirection]:
    """One unit direction per target; targets with too few samples or no difference are left out."""
    cor = activations.mask(Outcome.CORRECT)
    hal = activations.mask(Outcome.HALLUCINATING)
    if cor.sum() < 2 or hal.sum() < 2:
        return {}
    out = {}
    for c in sorted(targets):
        x = activations.component(c)
        d = mean_difference(x[cor], x[hal])
        if d is not None:
            out[c] = SteerDirection(c, d)
    return out


@dataclass
class ProbeSet:
    ranked: list[SteerDirection]  # best validation accuracy first
    skipped: list[str] = field(default_factory=list)

    def top(self, K: int) -> dict[HeadId, SteerDirection]:
        return {p.component: p for p in self.ranked[:K]}


def train_iti_probes(model: ToyModel, samples: Sequence[TaskSample], seed: int,
                     activations: Activations | None = None, l2: float = 1e-2) -> ProbeSet:
    """One class-weighted logistic probe per head on pre-output-projection activations.

    Labels are 1 for hallucinated answers and 0 for correct ones; Miss samples
    are left out. Heads are ranked by holdout accuracy, ties by (layer, head).
    """
    acts = capture_activations(model, samples) if activations is None else activations
    keep = acts.mask(Outcome.CORRECT) | acts.mask(Outcome.HALLUCINATING)
    y = acts.mask(Outcome.HALLUCINATING)[keep].astype(int)
    probes = []
    skipped = []
    for layer in range(model.depth):
        for head in range(model.cfg.heads):
            hid = HeadId(layer, head)
            X = acts.heads[keep, layer, head]
            try:
                fit: ProbeModel = fit_logistic(X, y, l2=l2, class_weighted=True, seed=seed)
            except FitError as exc:
                skipped.append(f"{hid}: {exc}")
                continue
            norm = float(np.linalg.norm(fit.weights))
            if norm == 0.0:
                skipped.append(f"{hid}: zero weight vector")
                continue
            w_hat = fit.weights / norm
            sigma = float(np.std(X[fit.train_index] @ w_hat))
            probes.append(SteerDirection(hid, w_hat, sigma, fit.validation_accuracy))
    probes.sort(key=lambda p: (-p.validation_accuracy, p.component.layer, p.component.head))
    return ProbeSet(probes, skipped)


# ---------------------------------------------------------------------------
# plan grids
# ---------------------------------------------------------------------------


def uniform_plans(circuit: Circuit, s_grid: Sequence[float] = S_GRID) -> list[InterventionPlan]:
    targets = tuple(circuit.hallucination)
    if not targets:
        return []
    return [InterventionPlan(Mode.UNIFORM_SCALE, targets, s=s) for s in s_grid]


def topk_targets(circuit: Circuit, k: int) -> tuple[ComponentId, ...]:
    """The k hallucination-pathway components with the largest |d| (ties by component order)."""
    stats = sorted((circuit.stat(c) for c in circuit.hallucination),
                   key=lambda st: (-abs(st.cohens_d), st.component))
    return tuple(sorted(st.component for st in stats[:k]))


def topk_plans(circuit: Circuit, k_grid: Sequence[int] = K_GRID,
               s_grid: Sequence[float] = S_GRID) -> list[InterventionPlan]:
    """k values exceeding the pathway size are skipped (they would repeat the uniform plan)."""
    n = len(circuit.hallucination)
    return [InterventionPlan(Mode.TOPK_SCALE, topk_targets(circuit, k), s=s, k=k)
            for k in k_grid if k <= n for s in s_grid]


def projection_plans(directions: Mapping[ComponentId, SteerDirection],
                     alphas: Sequence[float] = PROJECTION_ALPHAS) -> list[InterventionPlan]:
    targets = tuple(sorted(directions))
    if not targets:
        return []
    return [InterventionPlan(Mode.MEAN_DIFF_PROJECTION, targets, alpha=a) for a in alphas]


def iti_plans(probes: ProbeSet, total_heads: int, head_counts: Sequence[int] = ITI_HEAD_COUNTS,
              alphas: Sequence[float] = ITI_ALPHAS) -> list[InterventionPlan]:
    """Head counts above the model's head total are dropped."""
    out = []
    for K in head_counts:
        if K > total_heads or K > len(probes.ranked):
            continue
        heads = tuple(sorted(probes.top(K), key=lambda h: (h.layer, h.head)))
        out += [InterventionPlan(Mode.PROBE_ITI, heads, alpha=a, K=K) for a in alphas]
    return out


def grounding_plans(circuit: Circuit, s_grid: Sequence[float] = S_GRID) -> list[InterventionPlan]:
    targets = tuple(circuit.grounding)
    if not targets:
        return []
    return [InterventionPlan(Mode.GROUNDING_SUPPRESSION, targets, s=s) for s in s_grid]


def random_control_plans(model: ToyModel, cardinality: int, s: float, master_seed: int,
                         n_seeds: int = RANDOM_SEEDS) -> list[InterventionPlan]:
    """Random component sets of a given size, one per seed, drawn from every component."""
    comps = model.components
    out = []
    for seed in range(n_seeds):
        rng = np.random.default_rng([master_seed, 0x7A4D, seed])
        idx = rng.choice(len(comps), size=min(cardinality, len(comps)), replace=False)
        out.append(InterventionPlan(Mode.RANDOM_CONTROL, tuple(sorted(comps[i] for i in idx)), s=s, seed=seed))
    return out


# ---------------------------------------------------------------------------
# evaluation and selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def accuracy(self) -> float:
        n = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / n if n else 0.0

    @property
    def hallucination_rate(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0


def confusion(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    pred = np.asarray(pred) == int(Answer.YES)
    truth = np.asarray(truth) == int(Answer.YES)
    return Confusion(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                     int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))


@dataclass(frozen=True)
class EvalOutcome:
    accuracy: float
    hallucination_rate: float
    delta_accuracy_pp: float
    delta_hallucination_pp: float
    relative_reduction: float
    confusion: Confusion

    @classmethod
    def from_confusion(cls, conf: Confusion, baseline: Confusion | None = None) -> "EvalOutcome":
        base = conf if baseline is None else baseline
        acc, hr = conf.accuracy, conf.hallucination_rate
        b_acc, b_hr = base.accuracy, base.hallucination_rate
        rel = (b_hr - hr) / b_hr if b_hr > 0 else 0.0
        return cls(acc, hr, 100.0 * (acc - b_acc), 100.0 * (hr - b_hr), rel, conf)

    def to_record(self) -> dict:
        c = self.confusion
        return {
            "accuracy": self.accuracy,
            "hallucination_rate": self.hallucination_rate,
            "delta_accuracy_pp": self.delta_accuracy_pp,
            "delta_hallucination_pp": self.delta_hallucination_pp,
            "relative_reduction": self.relative_reduction,
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
        }


def predict(model: ToyModel, plan: InterventionPlan | None, samples: Sequence[TaskSample],
            directions: Mapping | None = None, chunk: int = 200) -> np.ndarray:
    site = head = None
    if plan is not None:
        site, head = plan_callbacks(model, plan, directions)
    out = []
    for i in range(0, len(samples), chunk):
        part = list(samples[i:i + chunk])
        out.append(answers(run_batch(model, embed(model, part), site, head).logits))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate_plan(model: ToyModel, plan: InterventionPlan | None, samples: Sequence[TaskSample],
                  directions: Mapping | None = None, baseline: Confusion | None = None) -> EvalOutcome:
    truth = np.array([int(s.ground_truth) for s in samples])
    conf = confusion(predict(model, plan, samples, directions), truth)
    return EvalOutcome.from_confusion(conf, baseline)


@dataclass
class Selection:
    family: str
    selected: InterventionPlan | None
    selection_outcomes: dict[str, EvalOutcome]
    selection_baseline: EvalOutcome
    evaluation: EvalOutcome
    evaluation_baseline: EvalOutcome
    notice: str = ""

    def to_record(self) -> dict:
        return {
            "family": self.family,
            "selected": None if self.selected is None else self.selected.to_record(),
            "selection_baseline": self.selection_baseline.to_record(),
            "evaluation": self.evaluation.to_record(),
            "evaluation_baseline": self.evaluation_baseline.to_record(),
            "notice": self.notice,
        }


def select_plan(plans: Sequence[InterventionPlan], outcomes: Mapping[str, EvalOutcome],
                baseline: EvalOutcome, budget_pp: float = BUDGET_PP) -> InterventionPlan | None:
    """Apply the selection ladder to precomputed selection-set outcomes."""
    feasible = []
    for p in plans:
        o = outcomes[p.plan_id]
        if 100.0 * (baseline.accuracy - o.accuracy) <= budget_pp + 1e-9:
            feasible.append((o.hallucination_rate, -o.accuracy, p.strength, p.plan_id, p))
    if not feasible:
        return None
    return min(feasible, key=lambda r: r[:4])[4]


def select_and_evaluate(model: ToyModel, plans: Sequence[InterventionPlan],
                        selection_set: Sequence[TaskSample],
                        evaluation_set: Callable[[], Sequence[TaskSample]] | Sequence[TaskSample],
                        budget_pp: float = BUDGET_PP, directions: Mapping | None = None,
                        family: str = "", known: Mapping[str, EvalOutcome] | None = None) -> Selection:
    """Grid search on the selection set, then score the chosen plan on the evaluation set.

    ``evaluation_set`` may be a callable so that evaluation samples are only
    produced after the choice is made. ``known`` holds selection-set outcomes
    already computed for some plans.
    """
    sel_ids = {s.sample_id for s in selection_set}
    truth = np.array([int(s.ground_truth) for s in selection_set])
    base_conf = confusion(predict(model, None, selection_set), truth)
    base = EvalOutcome.from_confusion(base_conf)
    known = known or {}
    outcomes = {p.plan_id: known[p.plan_id] if p.plan_id in known else EvalOutcome.from_confusion(
        confusion(predict(model, p, selection_set, directions), truth), base_conf) for p in plans}
    chosen = select_plan(plans, outcomes, base, budget_pp)
    eval_samples = evaluation_set() if callable(evaluation_set) else evaluation_set
    if sel_ids & {s.sample_id for s in eval_samples}:
        raise ValueError("selection and evaluation sets overlap")
    eval_truth = np.array([int(s.ground_truth) for s in eval_samples])
    eval_base_conf = confusion(predict(model, None, eval_samples), eval_truth)
    eval_base = EvalOutcome.from_confusion(eval_base_conf)
    notice = ""
    if chosen is None:
        notice = "no configuration within the accuracy budget; baseline returned"
        evaluation = eval_base
    else:
        evaluation = evaluate_plan(model, chosen, eval_samples, directions, eval_base_conf)
    return Selection(family or (plans[0].mode.value if plans else ""), chosen, outcomes, base,
                     evaluation, eval_base, notice)


@dataclass
class RandomControlSummary:
    plans: list[InterventionPlan]
    outcomes: list[EvalOutcome]

    @property
    def mean_relative_reduction(self) -> float:
        return float(np.mean([o.relative_reduction for o in self.outcomes])) if self.outcomes else 0.0

    @property
    def spread(self) -> float:
        return float(np.std([o.relative_reduction for o in self.outcomes])) if self.outcomes else 0.0


def random_control(model: ToyModel, reference: InterventionPlan, evaluation_set: Sequence[TaskSample],
                   master_seed: int, n_seeds: int = RANDOM_SEEDS,
                   baseline: Confusion | None = None) -> RandomControlSummary:
    """Evaluate random component sets matching ``reference``'s s and cardinality."""
    plans = random_control_plans(model, len(reference.targets), reference.s, master_seed, n_seeds)
    return RandomControlSummary(plans, [evaluate_plan(model, p, evaluation_set, baseline=baseline) for p in plans])
