"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The reference pipeline is run twice (one worker, then four) in a session
fixture; criteria 5, 6 and 8 read its artifacts.
"""

import filecmp
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from circuitscope.circuits import Circuit, Pathway
from circuitscope.cli import main
from circuitscope.cpa import cpa_per_sample, cpa_rows
from circuitscope.lens import lens_trajectories
from circuitscope.patchengine import calibrate_noise, run_joints, run_traces
from circuitscope.pipeline import PipelineConfig, Workspace, _corruption, derive_seed
from circuitscope.specgeo import geometry_row, spectrum_summary
from circuitscope.statkit import (
    bh_adjust,
    fisher_exact,
    fit_logistic,
    logistic_grad,
    logistic_loss,
    one_sample_t,
    tost_equivalence,
    welch_t,
)
from circuitscope.statkit.logistic import sample_weights
from circuitscope.steer import InterventionPlan, Mode, SteerDirection, plan_callbacks
from circuitscope.toyvlm import ComponentId, Kind, Outcome, Split, embed, forward, generate_task, run_batch

REF = "toy-d8"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("reference")
    out = {}
    for jobs in (1, 4):
        d = base / f"jobs{jobs}"
        t0 = time.perf_counter()
        code = main(["all", "--out", str(d), "--jobs", str(jobs)])
        out[jobs] = (d, code, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def ref_ws(reference_runs):
    d, code, _ = reference_runs[1]
    assert code == 0
    return Workspace(d, PipelineConfig())


def _records(ws, model_id, name):
    return ws.load(model_id, name)


# ---------------------------------------------------------------------------


def test_criterion_1_statistics_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bh_ok = True
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        p = rng.uniform(size=m) ** rng.uniform(0.2, 3.0)
        if rng.uniform() < 0.3:
            p[rng.integers(0, m, size=m // 2)] = p[0]  # ties
        bh_ok &= np.array_equal(bh_adjust(p).adjusted_p, oracles.bh_brute(p))

    ref = oracles.fisher_all(40)
    fisher_err = max(abs(fisher_exact([[a, b], [c, d]]).p_value - p) for (a, b, c, d), p in ref.items())

    t_err = 0.0
    for i in range(200):
        if i % 2 == 0:
            a = rng.normal(0, rng.uniform(0.1, 3), int(rng.integers(2, 40)))
            b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), int(rng.integers(2, 40)))
            got, want = welch_t(a, b).p_value, float(oracles.welch_mp(a, b))
        else:
            x = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), int(rng.integers(2, 40)))
            got, want = one_sample_t(x, 0.0).p_value, float(oracles.one_sample_mp(x, 0.0))
        t_err = max(t_err, abs(got - want))

    tost_p = min(tost_equivalence(0.3, n, 0.3).p_value for n in (4, 10, 50, 1000))
    tost_p = min(tost_p, tost_equivalence(-0.3, 50, 0.3).p_value)
    elapsed = time.perf_counter() - t0
    ok = bh_ok and fisher_err <= 1e-12 and t_err <= 1e-10 and tost_p >= 0.5 and elapsed < 60
    verdict(1, ok, f"bh_exact={bh_ok} fisher_tables={len(ref)} max_err={fisher_err:.1e} "
                   f"t_max_err={t_err:.1e} tost_boundary_p={tost_p:.3f} runtime={elapsed:.1f}s")


def test_criterion_2_patching_identities(verdict, ref_cfg, ref_model):
    spec = _corruption(PipelineConfig(), REF)
    samples = generate_task(ref_cfg, derive_seed(0, "samples", REF), 1000, Split.DISCOVERY)
    sub = samples[:50]
    traces = run_traces(ref_model, sub, spec)
    # empty patch: the patched run is the corrupt run, so IE = 0
    empty = run_traces(ref_model, sub, spec, [])
    empty_ok = all(e.delta_patched == {} and e.delta_corrupt == t.delta_corrupt for e, t in zip(empty, traces))
    joints_any = run_joints(ref_model, sub, spec, [ComponentId(0, Kind.ATTN)])
    empty_ok &= all(j.delta_corrupt == t.delta_corrupt for j, t in zip(joints_any, traces))
    full = run_joints(ref_model, sub, spec, ref_model.components)
    full_err = max(abs(j.delta_joint - t.delta_clean) for t, j in zip(traces, full))
    single_exact = all(
        j.delta_joint == t.delta_patched[comp]
        for comp in ref_model.components
        for t, j in zip(traces, run_joints(ref_model, sub, spec, [comp])))
    cal = calibrate_noise(ref_model, samples, spec)
    ok = empty_ok and full_err <= 1e-6 and single_exact and 0.45 <= cal.corrupt_accuracy <= 0.55
    verdict(2, ok, f"empty_patch_ie_zero={empty_ok} full_restore_err={full_err:.1e} "
                   f"singleton_bit_exact={single_exact} corrupt_accuracy={cal.corrupt_accuracy:.3f}")


def test_criterion_3_cpa_identities(verdict, ref_ws, ref_model):
    cfg = ref_ws.config
    spec = _corruption(cfg, REF)
    samples = ref_ws.load_samples(REF, Split.CPA)[:200]
    lone = ComponentId(4, Kind.MLP)
    traces = run_traces(ref_model, samples, spec, [lone])
    joints = run_joints(ref_model, samples, spec, [lone])
    singles = [cpa_per_sample(t, j, [lone]) for t, j in zip(traces, joints) if t.outcome != Outcome.MISS]
    single_ok = all(r.interaction == 0.0 and r.mag_diff == 0.0 for r in singles)

    lay = ref_model.layout
    pair = [ComponentId(lay.presence_a, Kind.ATTN), ComponentId(lay.presence_b, Kind.ATTN)]
    tr = run_traces(ref_model, samples, spec, pair)
    jt = run_joints(ref_model, samples, spec, pair)
    circ = Circuit(REF, ref_model.depth, [], {c: Pathway.GROUNDING for c in pair})
    ratios = [r.magnitude_ratio for r in cpa_rows(tr, {Pathway.GROUNDING: jt}, circ) if r.magnitude_ratio is not None]
    mean_ratio = float(np.mean(ratios))
    ok = single_ok and abs(mean_ratio - 0.5) <= 0.05
    verdict(3, ok, f"singleton_zero={single_ok} (n={len(singles)}) duplicated_pair={pair[0]}+{pair[1]} "
                   f"magnitude_ratio={mean_ratio:.3f} over {len(ratios)} samples "
                   f"(real-model context range 0.07-0.69)")


def test_criterion_4_lens_identities(verdict, ref_ws, ref_model):
    samples = ref_ws.load_samples(REF, Split.LENS)
    assert len(samples) == 200
    trajs = lens_trajectories(ref_model, samples)
    tele = max(float(np.max(np.abs(t.logit_diff[0] + np.cumsum(t.per_layer_delta) - t.logit_diff[1:]))) for t in trajs)
    final = max(abs(t.logit_diff[-1] - forward(ref_model, s).delta) for t, s in zip(trajs, samples))
    hal = [t for t in trajs if t.outcome == Outcome.HALLUCINATING]
    mean_delta = np.mean([t.per_layer_delta for t in hal], axis=0)
    argmin = int(np.argmin(mean_delta))
    prior = list(ref_model.layout.prior)
    ok = tele <= 1e-9 and final <= 1e-9 and argmin in prior and len(hal) > 0
    verdict(4, ok, f"telescoping_err={tele:.1e} final_layer_err={final:.1e} n_halluc={len(hal)} "
                   f"argmin_layer={argmin} prior_layers={prior}")


def test_criterion_5_dual_pathway(verdict, ref_ws, ref_model):
    circ = ref_ws.load_circuit(REF)
    recs = _records(ref_ws, REF, "circuit")
    summary = next(r for r in recs if r["record"] == "sensitivity_summary")
    members = summary["members"]

    def pairs(d):
        return {(c, p) for p, cs in members[d].items() for c in cs}

    nested = pairs("0.35") <= pairs("0.3") <= pairs("0.25")
    prior = [ComponentId(li, Kind.MLP) for li in ref_model.layout.prior]
    prior_in = all(c in circ.hallucination for c in prior)
    n_disc = next(r for r in recs if r["record"] == "summary")["n_samples"]
    ok = n_disc == 1000 and len(circ.grounding) >= 1 and len(circ.hallucination) >= 1 and prior_in and nested
    verdict(5, ok, f"n={n_disc} grounding={len(circ.grounding)} hallucination={len(circ.hallucination)} "
                   f"prior_mlp={[str(c) for c in prior]} in_hallucination={prior_in} nested={nested}")


def test_criterion_6_interventions(verdict, ref_ws, ref_model):
    s = ref_ws.load_samples(REF, Split.EVALUATION)[:20]
    x0 = embed(ref_model, s)
    base = run_batch(ref_model, x0).logits
    circ = ref_ws.load_circuit(REF)
    targets = tuple(circ.hallucination)
    rng = np.random.default_rng(0)
    d = rng.normal(size=ref_model.cfg.width)
    dirs = {t: SteerDirection(t, d / np.linalg.norm(d)) for t in targets}
    noop = [InterventionPlan(Mode.UNIFORM_SCALE, targets, s=1.0),
            InterventionPlan(Mode.MEAN_DIFF_PROJECTION, targets, alpha=0.0)]
    noop_ok = all(np.array_equal(run_batch(ref_model, x0, *plan_callbacks(ref_model, p, dirs)).logits, base)
                  for p in noop)
    site, _ = plan_callbacks(ref_model, InterventionPlan(Mode.MEAN_DIFF_PROJECTION, targets, alpha=1.0), dirs)
    out = rng.normal(size=(4, 7, ref_model.cfg.width)) * 5
    proj_err = max(float(np.max(np.abs(site(t, out) @ dirs[t].direction))) for t in targets)

    recs = _records(ref_ws, REF, "intervene")
    sel = next(r for r in recs if r["record"] == "selection" and r["family"] == "UniformScale")
    rel = sel["evaluation"]["relative_reduction"]
    cost = -sel["evaluation"]["delta_accuracy_pp"]
    g0 = next(r for r in recs if r["record"] == "grounding" and r["plan"]["s"] == 0.0)
    rand = next(r for r in recs if r["record"] == "random_summary")
    n_random = sum(r["record"] == "random" for r in recs)
    ok = (noop_ok and proj_err <= 1e-9 and sel["selected"] is not None and rel >= 0.20 and cost <= 2.0
          and 0.45 <= g0["accuracy"] <= 0.55 and n_random == 5
          and rand["mean_relative_reduction"] < 0.5 * rel)
    verdict(6, ok, f"noop_bit_exact={noop_ok} projection_residual={proj_err:.1e} "
                   f"selected={sel['selected'] and sel['selected']['plan_id']} relative_reduction={rel:.3f} "
                   f"accuracy_cost_pp={cost:.2f} grounding_s0_accuracy={g0['accuracy']:.3f} "
                   f"random_mean={rand['mean_relative_reduction']:.3f}")


def test_criterion_7_geometry(verdict):
    row = spectrum_summary([3.0, 1.0])
    exact = (math.isclose(row.participation_ratio, 100 / 82, rel_tol=1e-12)
             and math.isclose(row.top1_variance_fraction, 0.9, rel_tol=1e-12) and row.rank90 == 1)
    rng = np.random.default_rng(7)
    inv_err = 0.0
    pr_ok = True
    for _ in range(50):
        n, w = int(rng.integers(3, 20)), int(rng.integers(2, 12))
        m = rng.normal(size=(n, w)) * rng.uniform(0.1, 5, size=w)
        q1, _ = np.linalg.qr(rng.normal(size=(n, n)))
        q2, _ = np.linalg.qr(rng.normal(size=(w, w)))
        a, b = geometry_row(m), geometry_row(q1 @ m @ q2)
        inv_err = max(inv_err, abs(a.participation_ratio - b.participation_ratio),
                      abs(a.top1_variance_fraction - b.top1_variance_fraction))
        pr_ok &= a.rank90 == b.rank90 and 1.0 <= a.participation_ratio <= a.rank + 1e-12
    ok = exact and inv_err <= 1e-8 and pr_ok
    verdict(7, ok, f"spectrum[3,1]=({row.participation_ratio:.6f},{row.top1_variance_fraction},{row.rank90}) "
                   f"orthogonal_invariance_err={inv_err:.1e} pr_in_[1,rank]={pr_ok}")


def _tree(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_criterion_8_reproducibility(verdict, reference_runs):
    (d1, c1, t1), (d4, c4, t4) = reference_runs[1], reference_runs[4]
    files = _tree(d1)
    same_list = files == _tree(d4)
    _, mismatch, errors = filecmp.cmpfiles(d1, d4, files, shallow=False)
    ok = c1 == 0 and c4 == 0 and same_list and not mismatch and not errors and max(t1, t4) < 300
    verdict(8, ok, f"files={len(files)} byte_identical={same_list and not mismatch and not errors} "
                   f"wall_jobs1={t1:.0f}s wall_jobs4={t4:.0f}s cpus={os.cpu_count()}")


def test_criterion_9_probes(verdict):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(120, 4))
    y = (X @ [1.0, -0.5, 0.2, 0.0] + rng.normal(size=120) > 0).astype(float)
    sw = sample_weights(y, True)
    worst = 0.0
    for params in (rng.normal(size=5), np.zeros(5), 2 * rng.normal(size=5)):
        g = logistic_grad(params, X, y, sw, 0.01)
        h = 1e-6
        fd = np.array([(logistic_loss(params + h * e, X, y, sw, 0.01) - logistic_loss(params - h * e, X, y, sw, 0.01))
                       / (2 * h) for e in np.eye(5)])
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3))))
    x = np.linspace(-2, 2, 200)
    sep = fit_logistic(x, (x > 0.1).astype(int), l2=1e-4, seed=1).validation_accuracy
    labels = (rng.uniform(size=400) < 0.3).astype(int)
    noise = rng.normal(size=(400, 16))
    null = fit_logistic(noise, labels, class_weighted=False, seed=2)
    majority = max(np.mean(labels[null.val_index]), 1 - np.mean(labels[null.val_index]))
    gap = abs(null.validation_accuracy - majority)
    ok = worst <= 1e-5 and sep == 1.0 and gap <= 0.1
    verdict(9, ok, f"grad_rel_err={worst:.1e} separable_val_acc={sep} "
                   f"null_head_acc={null.validation_accuracy:.3f} majority={majority:.3f}")
