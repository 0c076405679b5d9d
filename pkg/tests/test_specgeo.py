import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from circuitscope.specgeo import (
    UndefinedGeometry,
    component_geometry,
    geometry_row,
    hallucination_deviation_matrix,
    spectrum_summary,
)
from circuitscope.toyvlm import ComponentId, Kind, Outcome


def test_rank_one_and_isotropic_spectra():
    r1 = spectrum_summary([3.0, 0.0, 0.0])
    assert (r1.participation_ratio, r1.top1_variance_fraction, r1.rank90, r1.rank) == (1.0, 1.0, 1, 1)
    iso = spectrum_summary([2.0] * 10)
    assert iso.participation_ratio == pytest.approx(10.0)
    assert iso.top1_variance_fraction == pytest.approx(0.1)
    assert iso.rank90 == 9


def test_tiny_values_are_cut():
    row = spectrum_summary([1.0, 1e-12])
    assert row.rank == 1 and row.participation_ratio == 1.0


def test_zero_matrix_undefined():
    with pytest.raises(UndefinedGeometry):
        geometry_row(np.zeros((4, 3)))
    with pytest.raises(UndefinedGeometry):
        spectrum_summary([0.0, 0.0])


@given(hnp.arrays(float, st.tuples(st.integers(2, 8), st.integers(2, 8)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)))
def test_summary_matches_independent_spectrum(m):
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[0] < 1e-6:
        return
    sv = np.where(sv < 1e-10 * sv[0], 0.0, sv)
    pr, top1, r90 = oracles.spectrum_stats(sv)
    row = geometry_row(m)
    assert row.participation_ratio == pytest.approx(pr, rel=1e-6)
    assert row.top1_variance_fraction == pytest.approx(top1, rel=1e-6)
    assert row.rank90 == r90
    assert 1.0 - 1e-9 <= row.participation_ratio <= row.rank + 1e-9
    assert 1 <= row.rank90 <= row.rank


@given(st.floats(1e-3, 1e3), st.floats(-1, 1).filter(lambda v: v != 0))
def test_scale_invariance(scale, sign):
    m = np.random.default_rng(0).normal(size=(6, 5))
    a, b = geometry_row(m), geometry_row(m * scale * sign)
    assert a.participation_ratio == pytest.approx(b.participation_ratio, rel=1e-9)
    assert a.rank90 == b.rank90


def test_deviation_matrix_subtracts_correct_mean():
    x = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0], [7.0, 1.0], [0.0, 0.0]])
    outs = [Outcome.CORRECT, Outcome.CORRECT, Outcome.HALLUCINATING, Outcome.HALLUCINATING, Outcome.MISS]
    np.testing.assert_allclose(hallucination_deviation_matrix(x, outs), [[3.0, 4.0], [5.0, 0.0]])
    with pytest.raises(ValueError):
        hallucination_deviation_matrix(x[:3], outs[:3])


def test_component_geometry_skips_and_means():
    rng = np.random.default_rng(5)
    outs = [Outcome.CORRECT] * 10 + [Outcome.HALLUCINATING] * 8
    good, flat = ComponentId(1, Kind.MLP), ComponentId(0, Kind.ATTN)
    acts = {good: rng.normal(size=(18, 6)), flat: np.ones((18, 6))}
    summary = component_geometry("m", [good, flat], acts.__getitem__, outs)
    assert summary.k == 1 and summary.rows[0].component == good
    assert len(summary.skipped) == 1 and summary.skipped[0].startswith("L0.attn")
    assert summary.means()["k"] == 1
    assert component_geometry("m", [], acts.__getitem__, outs).means()["mean_pr"] is None
