import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from circuitscope.circuits import Circuit, Pathway
from circuitscope.cpa import (
    ConsistencyError,
    CpaSampleRow,
    cpa_aggregate,
    cpa_per_sample,
    cpa_rows,
    cross_subset_effect,
)
from circuitscope.patchengine import CorruptionSpec, JointTrace, SampleTrace, run_joints, run_traces
from circuitscope.toyvlm import ComponentId, Kind, Outcome, Split, generate_task

A, B, C = ComponentId(0, Kind.ATTN), ComponentId(1, Kind.MLP), ComponentId(2, Kind.ATTN)

finite = st.floats(-50, 50, allow_nan=False)


def _pair(sid, outcome, corrupt, patched, joint):
    t = SampleTrace(sid, outcome, 3.0, corrupt, dict(zip((A, B), patched)), 3.0 - corrupt)
    return t, JointTrace(sid, (A, B), joint, corrupt)


def test_per_sample_values():
    t, j = _pair(0, Outcome.CORRECT, -1.0, (0.5, -2.0), 1.0)
    row = cpa_per_sample(t, j, [B, A])
    assert row.individual_ies == (1.5, -1.0)
    assert row.joint_ie == 2.0
    assert row.interaction == 2.0 - 0.5
    assert row.mag_diff == 2.0 - 2.5
    assert row.magnitude_ratio == pytest.approx(0.8)


@given(finite, finite, finite, finite)
def test_identities_hold_exactly(corrupt, p1, p2, joint):
    t, j = _pair(1, Outcome.HALLUCINATING, corrupt, (p1, p2), joint)
    row = cpa_per_sample(t, j, [A, B], Pathway.HALLUCINATION)
    assert row.interaction == row.joint_ie - (0.0 + row.individual_ies[0] + row.individual_ies[1])
    assert row.mag_diff == abs(row.joint_ie) - (0.0 + abs(row.individual_ies[0]) + abs(row.individual_ies[1]))
    assert row.mag_diff <= abs(row.interaction) + 1e-9 * (1 + abs(row.joint_ie))  # reverse triangle
    assert CpaSampleRow.from_record(row.to_record()) == row


def test_consistency_checks():
    t, j = _pair(0, Outcome.CORRECT, -1.0, (0.5, -2.0), 1.0)
    with pytest.raises(ConsistencyError):
        cpa_per_sample(t, JointTrace(5, (A, B), 1.0, -1.0), [A, B])
    with pytest.raises(ConsistencyError):
        cpa_per_sample(t, JointTrace(0, (A, C), 1.0, -1.0), [A, C])
    with pytest.raises(ConsistencyError):
        cpa_per_sample(t, JointTrace(0, (A, B), 1.0, -0.9), [A, B])
    with pytest.raises(ConsistencyError):
        cpa_per_sample(t, j, [A])
    miss, mj = _pair(0, Outcome.MISS, -1.0, (0.5, -2.0), 1.0)
    with pytest.raises(ConsistencyError):
        cpa_per_sample(miss, mj, [A, B])


def _rows(rng, outcome, n, shift):
    out = []
    for i in range(n):
        ies = tuple(rng.normal(shift, 0.5, 2))
        joint = 0.5 * sum(ies)
        out.append(CpaSampleRow(i if outcome == Outcome.CORRECT else 1000 + i, outcome, Pathway.GROUNDING, joint, ies,
                                joint - (ies[0] + ies[1]), abs(joint) - (abs(ies[0]) + abs(ies[1]))))
    return out


def test_aggregate_cells_and_cross_subset():
    rng = np.random.default_rng(2)
    rows = _rows(rng, Outcome.CORRECT, 60, 1.0) + _rows(rng, Outcome.HALLUCINATING, 50, -1.0)
    diag = cpa_aggregate(rows)
    cell = diag.cell(Pathway.GROUNDING, Outcome.CORRECT)
    assert cell.n == 60
    ies = np.array([v for r in rows[:60] for v in r.individual_ies])
    assert cell.fraction_positive == pytest.approx(np.mean(ies > 0))
    md = [r.mag_diff for r in rows[:60]]
    assert cell.magdiff_vs_zero.p_value == pytest.approx(sps.ttest_1samp(md, 0.0).pvalue, rel=1e-9)
    assert diag.cross[Pathway.GROUNDING].polarity_flip
    ref = sps.ttest_ind([np.mean(r.individual_ies) for r in rows[:60]],
                        [np.mean(r.individual_ies) for r in rows[60:]], equal_var=False)
    assert diag.cross[Pathway.GROUNDING].mean_ie.p_value == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-300)
    assert cross_subset_effect(diag, Pathway.GROUNDING) > 0
    assert not diag.cell(Pathway.HALLUCINATION, Outcome.CORRECT).available
    assert cross_subset_effect(diag, Pathway.HALLUCINATION) is None
    assert len(diag.to_records()) == 4


def test_rows_from_model_skip_miss_and_recompute(ref_cfg, ref_model):
    samples = generate_task(ref_cfg, 3, 30, Split.CPA)
    spec = CorruptionSpec(3.0, 5)
    g, h = [A, B], [ComponentId(5, Kind.MLP)]
    traces = run_traces(ref_model, samples, spec, g + h)
    joints = {Pathway.GROUNDING: run_joints(ref_model, samples, spec, g),
              Pathway.HALLUCINATION: run_joints(ref_model, samples, spec, h)}
    circ = Circuit("toy-d8", 8, [], {A: Pathway.GROUNDING, B: Pathway.GROUNDING, h[0]: Pathway.HALLUCINATION})
    rows = cpa_rows(traces, joints, circ)
    n_live = sum(t.outcome != Outcome.MISS for t in traces)
    assert len(rows) == 2 * n_live
    for r in rows:
        assert r.interaction == r.joint_ie - sum(r.individual_ies, 0.0)
        if r.pathway == Pathway.HALLUCINATION:
            # a single-member joint restoration is the single-component patch
            assert r.interaction == 0.0
