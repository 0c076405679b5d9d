import math

import numpy as np
import pytest

import oracles
from circuitscope.circuits import Circuit, Pathway
from circuitscope.lens import (
    LensTrajectory,
    lens_differential,
    lens_trajectories,
    lens_trajectory,
    mean_delta_by_layer,
    pathway_layers,
)
from circuitscope.toyvlm import Answer, ComponentId, Kind, Outcome, Split, embed, forward, generate_task


def test_final_layer_matches_model_output(ref_cfg, ref_model):
    samples = generate_task(ref_cfg, 4, 40, Split.LENS)
    for s, t in zip(samples, lens_trajectories(ref_model, samples, chunk=16)):
        rec = forward(ref_model, s)
        assert abs(t.logit_diff[-1] - rec.delta) < 1e-6
        assert t.outcome == rec.outcome
        np.testing.assert_allclose(np.cumsum(t.per_layer_delta) + t.logit_diff[0], t.logit_diff[1:], atol=1e-12)


def test_matches_loop_based_decoding(ref_cfg, ref_model):
    s = generate_task(ref_cfg, 2, 3, Split.LENS)[2]
    x0 = embed(ref_model, [s])[0]
    _, outs = oracles.reference_pass(ref_model, x0)
    resid = x0[-1].copy()
    expected = []
    for li in range(ref_cfg.depth + 1):
        hf = oracles._rms(resid, ref_model.ln_f)
        d = hf @ ref_model.unembed[oracles.YES] - hf @ ref_model.unembed[oracles.NO]
        expected.append(d if s.ground_truth == Answer.YES else -d)
        if li < ref_cfg.depth:
            resid = resid + outs[(li, 0)] + outs[(li, 1)]
    np.testing.assert_allclose(lens_trajectory(ref_model, s).logit_diff, expected, atol=1e-9)


def _traj(sid, outcome, deltas):
    deltas = np.asarray(deltas, float)
    return LensTrajectory(sid, outcome, np.concatenate([[0.0], np.cumsum(deltas)]), deltas)


def test_mixed_layers_count_for_both_pathways():
    circ = Circuit("m", 4, [], {ComponentId(1, Kind.ATTN): Pathway.GROUNDING,
                                ComponentId(1, Kind.MLP): Pathway.HALLUCINATION,
                                ComponentId(3, Kind.MLP): Pathway.HALLUCINATION})
    assert pathway_layers(circ, Pathway.GROUNDING) == [1]
    assert pathway_layers(circ, Pathway.HALLUCINATION) == [1, 3]


def test_differential_welch_on_group_means():
    circ = Circuit("m", 4, [], {ComponentId(0, Kind.MLP): Pathway.GROUNDING,
                                ComponentId(2, Kind.ATTN): Pathway.HALLUCINATION,
                                ComponentId(3, Kind.ATTN): Pathway.HALLUCINATION})
    rng = np.random.default_rng(0)
    trajs = [_traj(i, Outcome.CORRECT, rng.normal([1.0, 0, -0.2, 0.1], 0.3)) for i in range(20)]
    trajs += [_traj(100 + i, Outcome.HALLUCINATING, rng.normal([0.1, 0, 0.5, 0.6], 0.3)) for i in range(2)]
    rep = lens_differential(trajs, circ)
    row = rep.rows[0]
    g = [t.per_layer_delta[0] for t in trajs[:20]]
    h = [t.per_layer_delta[[2, 3]].mean() for t in trajs[:20]]
    assert row.grounding_mean == pytest.approx(np.mean(g))
    assert row.halluc_mean == pytest.approx(np.mean(h))
    assert row.result.effect_size > 0
    assert rep.rows[1].n == 2 and rep.rows[1].result is not None
    lone = lens_differential(trajs[:21], circ).rows[1]
    assert lone.result is None and lone.notice


def test_differential_empty_pathway_notice():
    circ = Circuit("m", 4, [], {ComponentId(0, Kind.MLP): Pathway.GROUNDING})
    rows = lens_differential([_traj(i, Outcome.CORRECT, [1, 0, 0, 0]) for i in range(3)], circ).rows
    assert all(r.result is None and "hallucination" in r.notice for r in rows)


def test_trajectory_record_round_trip_and_mean():
    t = _traj(3, Outcome.MISS, [0.5, -0.25])
    back = LensTrajectory.from_record(t.to_record())
    np.testing.assert_array_equal(back.logit_diff, t.logit_diff)
    assert back.outcome == Outcome.MISS
    np.testing.assert_allclose(mean_delta_by_layer([t, _traj(4, Outcome.CORRECT, [1.5, 0.25])]), [1.0, 0.0])
    assert math.isclose(t.logit_diff[-1], 0.25)
