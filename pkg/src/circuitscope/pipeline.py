"""Stage orchestration, configuration, and artifact layout.

Layout under the output directory::

    <model_id>/model.ndjson          model config and construction layout
    <model_id>/samples/<split>.ndjson
    <model_id>/traces.ndjson         calibration + discovery patch traces
    <model_id>/circuit.ndjson        per-component statistics, membership, sensitivity
    <model_id>/cpa.ndjson
    <model_id>/lens.ndjson
    <model_id>/intervene.ndjson
    <model_id>/geometry.ndjson
    crossarch.ndjson
    report/                          CSV tables, figures, report.md, summary.ndjson

Every random draw is seeded from (master seed, stage label, entity id).
Parallel work units are fixed-size chunks or whole models, so the bytes
written do not depend on the number of workers.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import io
from .circuits import (
    DEFAULT_D_GRID,
    Circuit,
    ComponentStat,
    ExtractionError,
    Pathway,
    circuit_from_stats,
    compare_all,
    component_stats,
    sensitivity_from_stats,
)
from .cpa import cpa_aggregate, cpa_rows
from .lens import lens_differential, lens_trajectories, mean_delta_by_layer
from .patchengine import (
    DEFAULT_CHUNK,
    CalibrationError,
    CalibrationReport,
    CorruptionSpec,
    SampleTrace,
    calibrate_noise,
    run_joints,
    run_traces,
)
from .specgeo import component_geometry
from .steer import (
    ITI_ALPHAS,
    ITI_HEAD_COUNTS,
    K_GRID,
    PROJECTION_ALPHAS,
    S_GRID,
    EvalOutcome,
    InterventionPlan,
    capture_activations,
    confusion,
    evaluate_plan,
    fit_mean_diff_directions,
    grounding_plans,
    iti_plans,
    predict,
    projection_plans,
    random_control,
    select_and_evaluate,
    topk_plans,
    train_iti_probes,
    uniform_plans,
)
from .toyvlm import ConfigError, Outcome, Split, TaskSample, ToyModel, ToyModelConfig, build_model, generate_task

log = logging.getLogger("circuitscope")


class DependencyError(RuntimeError):
    """An upstream artifact is missing or was produced under another config."""


class OverwriteError(RuntimeError):
    """Stage output exists and --force was not given."""


class Stage(str, enum.Enum):
    GENERATE = "generate"
    TRACE = "trace"
    EXTRACT = "extract"
    CPA = "cpa"
    LENS = "lens"
    INTERVENE = "intervene"
    GEOMETRY = "geometry"
    CROSSARCH = "crossarch"
    REPORT = "report"


STAGE_ORDER = list(Stage)
UPSTREAM = {
    Stage.GENERATE: (),
    Stage.TRACE: (Stage.GENERATE,),
    Stage.EXTRACT: (Stage.TRACE,),
    Stage.CPA: (Stage.EXTRACT,),
    Stage.LENS: (Stage.EXTRACT,),
    Stage.INTERVENE: (Stage.EXTRACT,),
    Stage.GEOMETRY: (Stage.EXTRACT,),
    Stage.CROSSARCH: (Stage.EXTRACT,),
    Stage.REPORT: (Stage.CPA, Stage.LENS, Stage.INTERVENE, Stage.GEOMETRY, Stage.CROSSARCH),
}

SPLITS = (Split.DISCOVERY, Split.CPA, Split.LENS, Split.SELECTION, Split.EVALUATION, Split.PROBE)
MIN_SPLIT = {Split.DISCOVERY: 100, Split.CPA: 4, Split.LENS: 4, Split.SELECTION: 10,
             Split.EVALUATION: 10, Split.PROBE: 20}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSizes:
    discovery: int = 1000
    cpa: int = 400
    lens: int = 200
    selection: int = 100
    evaluation: int = 400
    probe: int = 1000

    def of(self, split: Split) -> int:
        return getattr(self, split.value)


@dataclass(frozen=True)
class InterventionGrid:
    s_grid: tuple[float, ...] = S_GRID
    k_grid: tuple[int, ...] = K_GRID
    projection_alphas: tuple[float, ...] = PROJECTION_ALPHAS
    iti_alphas: tuple[float, ...] = ITI_ALPHAS
    iti_head_counts: tuple[int, ...] = ITI_HEAD_COUNTS
    random_seeds: int = 5
    budget_pp: float = 2.0


def reference_models() -> tuple[ToyModelConfig, ...]:
    return (
        ToyModelConfig(depth=6, seed=1000, model_id="toy-d6"),
        ToyModelConfig(depth=8, seed=0, model_id="toy-d8"),
        ToyModelConfig(depth=10, seed=3000, model_id="toy-d10"),
    )


@dataclass(frozen=True)
class PipelineConfig:
    models: tuple[ToyModelConfig, ...] = field(default_factory=reference_models)
    splits: SplitSizes = SplitSizes()
    alpha: float = 0.05
    d_min: float = 0.3
    d_grid: tuple[float, ...] = DEFAULT_D_GRID
    noise_multiplier: float = 3.0
    calibration_band: tuple[float, float] = (0.45, 0.55)
    interventions: InterventionGrid = InterventionGrid()
    seed: int = 0
    reference_model: str = "toy-d8"
    output: str | None = None

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("at least one model is required")
        ids = [m.label() for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"model ids must be unique: {ids}")
        for m in self.models:
            m.validate()
        for split in SPLITS:
            if self.splits.of(split) < MIN_SPLIT[split]:
                raise ConfigError(f"split {split.value} needs at least {MIN_SPLIT[split]} samples")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.d_min < 0:
            raise ConfigError("d_min must be non-negative")
        lo, hi = self.calibration_band
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("calibration_band must satisfy 0 <= low <= high <= 1")
        if self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be non-negative")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("seed must be a non-negative 63-bit integer")
        g = self.interventions
        if any(not 0.0 <= s <= 1.0 for s in g.s_grid):
            raise ConfigError("s_grid values must lie in [0, 1]")
        if g.random_seeds < 1 or g.budget_pp < 0:
            raise ConfigError("random_seeds must be >= 1 and budget_pp >= 0")

    def model_ids(self) -> list[str]:
        return [m.label() for m in self.models]

    def model(self, model_id: str) -> ToyModelConfig:
        for m in self.models:
            if m.label() == model_id:
                return m
        raise KeyError(model_id)

    def to_dict(self, with_output: bool = False) -> dict:
        d = dataclasses.asdict(self)
        d["models"] = [dataclasses.asdict(m) for m in self.models]
        if not with_output:
            d.pop("output")
        return _plain(d)

    def digest(self) -> str:
        return io.digest_of(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str, convert: dict[str, Callable] | None = None):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    convert = convert or {}
    kwargs = {}
    for k, v in data.items():
        try:
            kwargs[k] = convert[k](v) if k in convert else v
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{k}: {exc}") from None
    return cls(**kwargs)


def _tuple_of(kind):
    def conv(v):
        if not isinstance(v, (list, tuple)):
            raise TypeError("expected a list")
        return tuple(kind(x) for x in v)
    return conv


def config_from_dict(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    model_conv = {"prior_layers": lambda v: None if v is None else _tuple_of(int)(v),
                  "depth": int, "width": int, "heads": int, "vocab_size": int,
                  "visual_token_count": int, "seed": int, "n_clusters": int,
                  "prior_bias_strength": float, "model_id": str}
    conv = {
        "models": lambda v: tuple(_build(ToyModelConfig, m, "models[]", model_conv) for m in v),
        "splits": lambda v: _build(SplitSizes, v, "splits", {k: int for k in ("discovery", "cpa", "lens", "selection", "evaluation", "probe")}),
        "interventions": lambda v: _build(InterventionGrid, v, "interventions", {
            "s_grid": _tuple_of(float), "k_grid": _tuple_of(int), "projection_alphas": _tuple_of(float),
            "iti_alphas": _tuple_of(float), "iti_head_counts": _tuple_of(int), "random_seeds": int,
            "budget_pp": float}),
        "alpha": float, "d_min": float, "d_grid": _tuple_of(float), "noise_multiplier": float,
        "calibration_band": _tuple_of(float), "seed": int, "reference_model": str,
        "output": lambda v: None if v is None else str(v),
    }
    if "models" in data and not isinstance(data["models"], list):
        raise ConfigError("models must be a list")
    cfg = _build(PipelineConfig, data, "config", conv)
    if len(cfg.calibration_band) != 2:
        raise ConfigError("calibration_band must have two entries")
    cfg = dataclasses.replace(cfg, models=tuple(
        m if m.model_id else dataclasses.replace(m, model_id=m.label()) for m in cfg.models))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    return config_from_dict(data)


def derive_seed(master: int, label: str, entity: str = "") -> int:
    """Fixed labeled derivation: first 8 bytes of sha256("master/label/entity"), as a 63-bit integer."""
    h = hashlib.sha256(f"{master}/{label}/{entity}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


# ---------------------------------------------------------------------------
# paths and artifact access
# ---------------------------------------------------------------------------


@dataclass
class Workspace:
    root: Path
    config: PipelineConfig

    def model_dir(self, model_id: str) -> Path:
        return self.root / model_id

    def samples(self, model_id: str, split: Split) -> Path:
        return self.model_dir(model_id) / "samples" / f"{split.value}.ndjson"

    def artifact(self, model_id: str, name: str) -> Path:
        return self.model_dir(model_id) / f"{name}.ndjson"

    @property
    def crossarch(self) -> Path:
        return self.root / "crossarch.ndjson"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def outputs(self, stage: Stage) -> list[Path]:
        ids = self.config.model_ids()
        if stage == Stage.GENERATE:
            return [self.artifact(m, "model") for m in ids] + [self.samples(m, s) for m in ids for s in SPLITS]
        if stage == Stage.CROSSARCH:
            return [self.crossarch]
        if stage == Stage.REPORT:
            return [self.report_dir / "summary.ndjson"]
        name = {Stage.TRACE: "traces", Stage.EXTRACT: "circuit"}.get(stage, stage.value)
        return [self.artifact(m, name) for m in ids]

    def read(self, path: Path, kind: str) -> tuple[dict, list[dict]]:
        if not path.exists():
            raise DependencyError(f"missing artifact {path}")
        head, recs = io.read_ndjson(path, kind)
        if head.get("config_digest") != self.config.digest():
            raise DependencyError(f"{path} was produced under a different config; rerun its stage with --force")
        return head, recs

    def write(self, path: Path, kind: str, records, **extra) -> None:
        io.write_ndjson(path, io.header(kind, self.config.digest(), **extra), records)

    def load_samples(self, model_id: str, split: Split) -> list[TaskSample]:
        _, recs = self.read(self.samples(model_id, split), "samples")
        return [TaskSample.from_record(r) for r in recs]

    def load_traces(self, model_id: str) -> tuple[dict, list[SampleTrace]]:
        _, recs = self.read(self.artifact(model_id, "traces"), "traces")
        cal = next(r for r in recs if r["record"] == "calibration")
        return cal, [SampleTrace.from_record(r) for r in recs if r["record"] == "trace"]

    def load_circuit(self, model_id: str) -> Circuit:
        head, recs = self.read(self.artifact(model_id, "circuit"), "circuit")
        summary = next(r for r in recs if r["record"] == "summary")
        stats = [ComponentStat.from_record(r) for r in recs if r["record"] == "component"]
        return circuit_from_stats(stats, model_id, int(summary["depth"]), float(summary["alpha"]),
                                  float(summary["d_min"]), int(summary["n_excluded"]), int(summary["n_miss"]))

    def load(self, model_id: str, name: str) -> list[dict]:
        return self.read(self.artifact(model_id, name), name)[1]


@lru_cache(maxsize=8)
def _model(cfg: ToyModelConfig) -> ToyModel:
    return build_model(cfg)


def _corruption(config: PipelineConfig, model_id: str) -> CorruptionSpec:
    return CorruptionSpec(config.noise_multiplier, derive_seed(config.seed, "corruption", model_id))


class Executor:
    """Ordered map over work units, serial or across worker processes."""

    def __init__(self, jobs: int = 1):
        self.jobs = max(1, int(jobs))

    def map(self, fn, items: Sequence) -> list:
        items = list(items)
        if self.jobs == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ProcessPoolExecutor(max_workers=min(self.jobs, len(items))) as pool:
            return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# stage work (module-level so worker processes can import it)
# ---------------------------------------------------------------------------


def _trace_chunk(args) -> list[dict]:
    cfg, spec, samples = args
    return [t.to_record() for t in run_traces(_model(cfg), samples, spec)]


def _calibrate(args) -> dict:
    cfg, spec, samples, band = args
    return calibrate_noise(_model(cfg), samples, spec, band).to_record()


def _cpa_work(args) -> list[dict]:
    config, model_id, circuit, samples = args
    cfg = config.model(model_id)
    model = _model(cfg)
    spec = _corruption(config, model_id)
    if circuit.is_empty:
        return [{"record": "notice", "notice": "empty circuit: no pathway to analyse"}]
    traces = run_traces(model, samples, spec, components=circuit.members())
    joints = {p: run_joints(model, samples, spec, circuit.members(p)) for p in Pathway if circuit.members(p)}
    rows = cpa_rows(traces, joints, circuit)
    diag = cpa_aggregate(rows)
    out = [{"record": "row", **r.to_record(), "magnitude_ratio": r.magnitude_ratio} for r in rows]
    for p in Pathway:
        if not circuit.members(p):
            out.append({"record": "notice", "notice": f"empty {p.value} pathway; cells unavailable"})
    out += [{"record": "cell", **rec} for rec in diag.to_records()]
    return out


def _lens_work(args) -> list[dict]:
    config, model_id, circuit, samples = args
    model = _model(config.model(model_id))
    trajs = lens_trajectories(model, samples)
    out = [{"record": "trajectory", **t.to_record()} for t in trajs]
    for subset in (Outcome.CORRECT, Outcome.HALLUCINATING, Outcome.MISS):
        sel = [t for t in trajs if t.outcome == subset]
        if sel:
            out.append({"record": "layer_mean", "subset": subset.value, "n": len(sel),
                        "mean_per_layer_delta": mean_delta_by_layer(sel).tolist()})
    rep = lens_differential(trajs, circuit)
    out += [{"record": "differential", "grounding_layers": rep.grounding_layers,
             "halluc_layers": rep.halluc_layers, "note": rep.note, **row.to_record()} for row in rep.rows]
    return out


def _plan_rows(kind: str, plan: InterventionPlan | None, outcome, **extra) -> dict:
    return {"record": kind, **extra, "plan": None if plan is None else plan.to_record(),
            **outcome.to_record()}


def _intervene_work(args) -> list[dict]:
    config, model_id, circuit, probe_set, selection_set, evaluation_set = args
    model = _model(config.model(model_id))
    grid = config.interventions
    out: list[dict] = []
    if circuit.is_empty:
        return [{"record": "notice", "notice": "empty circuit: interventions skipped"}]
    acts = capture_activations(model, probe_set)
    directions = fit_mean_diff_directions(acts, circuit.hallucination)
    probes = train_iti_probes(model, probe_set, derive_seed(config.seed, "probe", model_id), acts)
    probe_dirs = {p.component: p for p in probes.ranked}
    accs = [p.validation_accuracy for p in probes.ranked]
    out.append({"record": "probes", "n_heads": len(accs),
                "mean_validation_accuracy": float(np.mean(accs)) if accs else None,
                "max_validation_accuracy": float(np.max(accs)) if accs else None,
                "top": [{"head": str(p.component), "validation_accuracy": p.validation_accuracy,
                         "sigma": p.sigma} for p in probes.ranked[:10]],
                "skipped": probes.skipped})

    total_heads = model.depth * model.cfg.heads
    families = [
        ("UniformScale", uniform_plans(circuit, grid.s_grid), None),
        ("TopKScale", topk_plans(circuit, grid.k_grid, grid.s_grid), None),
        ("MeanDiffProjection", projection_plans(directions, grid.projection_alphas), directions),
        ("ProbeIti", iti_plans(probes, total_heads, grid.iti_head_counts, grid.iti_alphas), probe_dirs),
    ]
    sel_truth = np.array([int(s.ground_truth) for s in selection_set])
    base_sel = confusion(predict(model, None, selection_set), sel_truth)
    ev_truth = np.array([int(s.ground_truth) for s in evaluation_set])
    base_ev = confusion(predict(model, None, evaluation_set), ev_truth)
    out.append(_plan_rows("baseline", None, EvalOutcome.from_confusion(base_ev), split="evaluation"))
    out.append(_plan_rows("baseline", None, EvalOutcome.from_confusion(base_sel), split="selection"))

    selected = {}
    all_plans: list[tuple[str, InterventionPlan, Any]] = []
    for fam, plans, dirs in families:
        if not plans:
            out.append({"record": "notice", "notice": f"{fam}: no plans (empty target set)"})
            continue
        res = select_and_evaluate(model, plans, selection_set, evaluation_set, grid.budget_pp, dirs, fam)
        selected[fam] = res
        out.append({"record": "selection", **res.to_record()})
        all_plans += [(fam, p, dirs) for p in plans]
        if fam == "TopKScale":
            for k in sorted({p.k for p in plans}):
                sub = [p for p in plans if p.k == k]
                r = select_and_evaluate(model, sub, selection_set, evaluation_set, grid.budget_pp, None, fam,
                                        known=res.selection_outcomes)
                out.append({"record": "topk", "k": k, **r.to_record()})

    for p in grounding_plans(circuit, grid.s_grid):
        out.append(_plan_rows("grounding", p, evaluate_plan(model, p, evaluation_set, baseline=base_ev)))

    uni = selected.get("UniformScale")
    if uni is not None and uni.selected is not None:
        rc = random_control(model, uni.selected, evaluation_set,
                            derive_seed(config.seed, "random-control", model_id), grid.random_seeds, base_ev)
        for p, o in zip(rc.plans, rc.outcomes):
            out.append(_plan_rows("random", p, o))
        out.append({"record": "random_summary", "s": uni.selected.s, "cardinality": len(uni.selected.targets),
                    "mean_relative_reduction": rc.mean_relative_reduction, "spread": rc.spread,
                    "mean_delta_hallucination_pp": float(np.mean([o.delta_hallucination_pp for o in rc.outcomes])),
                    "selected_relative_reduction": uni.evaluation.relative_reduction})
    else:
        out.append({"record": "notice", "notice": "random control skipped: no uniform-scaling plan selected"})

    # Pareto data: every grid point, scored after all selections are made.
    for fam, p, dirs in all_plans:
        sel = selected[fam].selection_outcomes[p.plan_id]
        chosen = selected[fam].selected
        if chosen is not None and chosen.plan_id == p.plan_id:
            ev = selected[fam].evaluation
        else:
            ev = evaluate_plan(model, p, evaluation_set, dirs, base_ev)
        out.append({"record": "pareto", "family": fam, "plan_id": p.plan_id,
                    "selection_accuracy": sel.accuracy, "selection_hallucination_rate": sel.hallucination_rate,
                    "evaluation_accuracy": ev.accuracy, "evaluation_hallucination_rate": ev.hallucination_rate,
                    "selected": selected[fam].selected is not None and selected[fam].selected.plan_id == p.plan_id})
    return out


def _geometry_work(args) -> list[dict]:
    config, model_id, circuit, samples = args
    model = _model(config.model(model_id))
    if not circuit.hallucination:
        return [{"record": "notice", "notice": "empty hallucination pathway: geometry skipped"}]
    acts = capture_activations(model, samples)
    summ = component_geometry(model_id, circuit.hallucination, acts.component, acts.outcomes)
    out = [{"record": "row", **r.to_record()} for r in summ.rows]
    out += [{"record": "notice", "notice": s} for s in summ.skipped]
    out.append({"record": "summary", "model_id": model_id, **summ.means()})
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_generate(ws: Workspace, ex: Executor) -> None:
    config = ws.config
    for cfg in config.models:
        mid = cfg.label()
        seed = derive_seed(config.seed, "samples", mid)
        log.info("seed %s/samples/%s = %d", config.seed, mid, seed)
        model = _model(cfg)
        lay = model.layout
        ws.write(ws.artifact(mid, "model"), "model", [{
            "record": "model", "model_id": mid, "config": _plain(dataclasses.asdict(cfg)),
            "weights_digest": model.digest(),
            "layout": {"presence_heads": [lay.presence_a, lay.presence_b], "context": lay.context,
                       "prior_mlp_layers": list(lay.prior), "readout": lay.readout, "clamp": lay.clamp},
        }], model_id=mid)
        for split in SPLITS:
            samples = generate_task(cfg, seed, config.splits.of(split), split)
            ws.write(ws.samples(mid, split), "samples", (s.to_record() for s in samples),
                     model_id=mid, split=split.value)


def _stage_trace(ws: Workspace, ex: Executor) -> None:
    config = ws.config
    for cfg in config.models:
        mid = cfg.label()
        spec = _corruption(config, mid)
        log.info("seed %s/corruption/%s = %d", config.seed, mid, spec.noise_seed)
        samples = ws.load_samples(mid, Split.DISCOVERY)
        cal = _calibrate((cfg, spec, samples, tuple(config.calibration_band)))
        if not cal["passed"]:
            rep = CalibrationReport(cal["n"], cal["noise_multiplier"], cal["clean_accuracy"],
                                    cal["corrupt_accuracy"], cal["corrupt_yes_rate"], cal["constant_answer"],
                                    tuple(config.calibration_band))
            raise CalibrationError(rep)
        chunks = [(cfg, spec, samples[i:i + DEFAULT_CHUNK]) for i in range(0, len(samples), DEFAULT_CHUNK)]
        traces = [t for part in ex.map(_trace_chunk, chunks) for t in part]
        ws.write(ws.artifact(mid, "traces"), "traces",
                 [{"record": "calibration", **cal}] + [{"record": "trace", **t} for t in traces],
                 model_id=mid, noise_seed=spec.noise_seed, noise_multiplier=spec.noise_multiplier)


def _stage_extract(ws: Workspace, ex: Executor) -> None:
    config = ws.config
    for cfg in config.models:
        mid = cfg.label()
        cal, traces = ws.load_traces(mid)
        n_no = sum(1 for t in traces if t.ground_truth.name == "NO")
        counts = {o: sum(1 for t in traces if t.outcome == o) for o in Outcome}
        base = {"record": "summary", "model_id": mid, "depth": cfg.depth, "alpha": config.alpha,
                "d_min": config.d_min, "n_samples": len(traces),
                "n_correct": counts[Outcome.CORRECT], "n_halluc": counts[Outcome.HALLUCINATING],
                "n_miss": counts[Outcome.MISS],
                "hallucination_rate": counts[Outcome.HALLUCINATING] / n_no if n_no else 0.0,
                "clean_accuracy": cal["clean_accuracy"], "corrupt_accuracy": cal["corrupt_accuracy"]}
        try:
            stats, excluded, miss = component_stats(traces, config.alpha, components=_model(cfg).components)
        except ExtractionError as exc:
            ws.write(ws.artifact(mid, "circuit"), "circuit",
                     [{**base, "n_excluded": 0, "n_grounding": 0, "n_hallucination": 0,
                       "notice": f"extraction failed: {exc}"}], model_id=mid)
            continue
        circ = circuit_from_stats(stats, mid, cfg.depth, config.alpha, config.d_min, excluded, miss)
        sens = sensitivity_from_stats(stats, mid, cfg.depth, config.alpha, config.d_grid, config.d_min)
        recs = [{**base, "n_excluded": excluded, "n_grounding": len(circ.grounding),
                 "n_hallucination": len(circ.hallucination),
                 "notice": "empty circuit" if circ.is_empty else ""}]
        for s in stats:
            p = circ.pathway.get(s.component)
            recs.append({"record": "component", **s.to_record(), "member": p is not None,
                         "pathway": None if p is None else p.value})
        for row in sens.to_records():
            recs.append({"record": "sensitivity", **row})
        recs.append({"record": "sensitivity_summary", "nested": sens.nested, "retains_five": sens.retains_five,
                     "reference_d": sens.reference_d,
                     "members": {str(d): {p.value: [str(c) for c in c_.members(p)] for p in Pathway}
                                 for d, c_ in sorted(sens.circuits.items())}})
        ws.write(ws.artifact(mid, "circuit"), "circuit", recs, model_id=mid)


def _circuits(ws: Workspace) -> dict[str, Circuit]:
    return {m: ws.load_circuit(m) for m in ws.config.model_ids()}


def _per_model(ws: Workspace, ex: Executor, name: str, fn, splits: Sequence[Split]) -> None:
    config = ws.config
    circuits = _circuits(ws)
    args = [(config, m, circuits[m], *[ws.load_samples(m, s) for s in splits]) for m in config.model_ids()]
    for mid, recs in zip(config.model_ids(), ex.map(fn, args)):
        ws.write(ws.artifact(mid, name), name, recs, model_id=mid)


def _stage_cpa(ws, ex):
    _per_model(ws, ex, "cpa", _cpa_work, [Split.CPA])


def _stage_lens(ws, ex):
    _per_model(ws, ex, "lens", _lens_work, [Split.LENS])


def _stage_intervene(ws, ex):
    for m in ws.config.model_ids():
        log.info("seed %s/probe/%s = %d", ws.config.seed, m, derive_seed(ws.config.seed, "probe", m))
        log.info("seed %s/random-control/%s = %d", ws.config.seed, m,
                 derive_seed(ws.config.seed, "random-control", m))
    _per_model(ws, ex, "intervene", _intervene_work, [Split.PROBE, Split.SELECTION, Split.EVALUATION])


def _stage_geometry(ws, ex):
    _per_model(ws, ex, "geometry", _geometry_work, [Split.DISCOVERY])


def _stage_crossarch(ws: Workspace, ex: Executor) -> None:
    ids = ws.config.model_ids()
    if len(ids) < 2:
        ws.write(ws.crossarch, "crossarch",
                 [{"record": "notice", "notice": "cross-architecture comparison needs at least two models"}])
        return
    circuits = [ws.load_circuit(m) for m in ids]
    recs = [{"record": "pair", **p.to_record()} for p in compare_all(circuits)]
    ws.write(ws.crossarch, "crossarch", recs, models=ids)


def _stage_report(ws: Workspace, ex: Executor) -> None:
    from .report import render_report

    render_report(ws)


STAGE_FN = {
    Stage.GENERATE: _stage_generate,
    Stage.TRACE: _stage_trace,
    Stage.EXTRACT: _stage_extract,
    Stage.CPA: _stage_cpa,
    Stage.LENS: _stage_lens,
    Stage.INTERVENE: _stage_intervene,
    Stage.GEOMETRY: _stage_geometry,
    Stage.CROSSARCH: _stage_crossarch,
    Stage.REPORT: _stage_report,
}


def upstream_closure(stage: Stage) -> list[Stage]:
    need: set[Stage] = set()
    todo = list(UPSTREAM[stage])
    while todo:
        s = todo.pop()
        if s not in need:
            need.add(s)
            todo += UPSTREAM[s]
    return [s for s in STAGE_ORDER if s in need]


def _complete(ws: Workspace, stage: Stage) -> bool:
    for p in ws.outputs(stage):
        if not p.exists():
            return False
        try:
            head, _ = io.read_ndjson(p)
        except (io.FormatError, ValueError):
            return False
        if head.get("config_digest") != ws.config.digest():
            return False
    return True


def run_stage(ws: Workspace, stage: Stage, force: bool = False, jobs: int = 1) -> float:
    """Run one stage; refuses to overwrite existing outputs unless ``force``."""
    existing = [p for p in ws.outputs(stage) if p.exists()]
    if existing and not force:
        raise OverwriteError(f"{existing[0]} exists; pass --force to overwrite")
    for dep in UPSTREAM[stage]:
        if stage == Stage.REPORT:
            break
        if not _complete(ws, dep):
            missing = [str(p) for p in ws.outputs(dep) if not p.exists()]
            what = missing[0] if missing else f"{dep.value} artifacts for this config"
            raise DependencyError(f"stage {stage.value} needs {what} (run '{dep.value}' first)")
    if stage == Stage.REPORT and not _complete(ws, Stage.EXTRACT):
        raise DependencyError("stage report needs circuit artifacts (run 'extract' first)")
    t0 = time.perf_counter()
    STAGE_FN[stage](ws, Executor(jobs))
    dt = time.perf_counter() - t0
    log.info("stage %s finished in %.2f s", stage.value, dt)
    return dt


def run(config: PipelineConfig, out: str | Path, stage: Stage | None = None, force: bool = False,
        jobs: int = 1, stage_only: bool = False) -> dict[Stage, float]:
    """Run ``stage`` (or every stage when None), filling in missing upstream stages unless ``stage_only``."""
    ws = Workspace(Path(out), config)
    ws.root.mkdir(parents=True, exist_ok=True)
    times = {}
    if stage is None:
        for s in STAGE_ORDER:
            times[s] = run_stage(ws, s, force, jobs)
        return times
    if not stage_only:
        for s in upstream_closure(stage):
            if not _complete(ws, s):
                times[s] = run_stage(ws, s, force, jobs)
    times[stage] = run_stage(ws, stage, force, jobs)
    return times
