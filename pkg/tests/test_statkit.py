import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from circuitscope.statkit import (
    FitError,
    UndefinedCorrelation,
    bh_adjust,
    cohens_d,
    fisher_exact,
    fit_logistic,
    logistic_grad,
    logistic_loss,
    one_sample_t,
    pearson_r,
    svd_spectrum,
    t_cdf,
    t_two_sided_p,
    tost_equivalence,
    welch_t,
)
from circuitscope.statkit.logistic import sample_weights

# Values frozen from 50-digit mpmath evaluations of the regularized incomplete beta.
WELCH_1_5_VS_2_6 = 0.34659350708733424782807498856881572930955647005029791
WELCH_UNEQUAL = 0.035836715644635141320146864559341429105348755208904934
ONE_SAMPLE_REF = 0.22435369946929779939584860592145092628504993435838
TOST_R0_N200 = 0.0000069855567765631016153023388200102140508593547368271
TOST_R0_N5 = 0.33079216178568813781440371423097181225180251066978

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# --- t distribution ---------------------------------------------------------


def test_t_cdf_symmetry_and_centre():
    assert t_cdf(0.0, 7.0) == pytest.approx(0.5, abs=1e-15)
    assert t_cdf(1.3, 4.5) + t_cdf(-1.3, 4.5) == pytest.approx(1.0, abs=1e-14)


def test_t_large_df_approaches_normal():
    z = 1.959963984540054
    assert t_two_sided_p(z, 1e7) == pytest.approx(0.05, abs=1e-6)


# --- welch / one-sample -------------------------------------------------------


def test_welch_identical_samples():
    r = welch_t([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_welch_reference_vectors():
    r = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert r.statistic == pytest.approx(-1.0, abs=1e-15)
    assert r.df == pytest.approx(8.0, abs=1e-12)
    assert abs(r.p_value - WELCH_1_5_VS_2_6) < 1e-10
    r = welch_t([0.31, 1.7, 2.2, -0.4, 0.95, 1.1], [2.05, 3.3, 1.9, 4.4])
    assert abs(r.p_value - WELCH_UNEQUAL) < 1e-10


def test_welch_degenerate_variances():
    r = welch_t([2.0, 2.0], [2.0, 2.0])
    assert r.p_value == 1.0 and r.statistic == 0.0
    r = welch_t([1.0, 1.0], [3.0, 3.0])
    assert r.p_value == 0.0 and r.degenerate


def test_cohens_d_large_n_limit():
    rng = np.random.default_rng(5)
    a = rng.normal(1.0, 2.0, 200_000)
    b = rng.normal(0.0, 2.0, 200_000)
    assert cohens_d(a, b) == pytest.approx(0.5, abs=0.01)


def test_one_sample_reference_and_trivial():
    r = one_sample_t([1.2, 0.8, 1.9, 1.4, 0.7, 1.55], 1.0)
    assert abs(r.p_value - ONE_SAMPLE_REF) < 1e-10
    r = one_sample_t([3.0, 3.0, 3.0], 3.0)
    assert r.p_value == 1.0
    rng = np.random.default_rng(1)
    big = rng.normal(0.2, 1.0, 100_000)
    assert one_sample_t(big, 0.0).p_value < 1e-100 or one_sample_t(big, 0.0).p_value == 0.0


def test_t_pvalues_against_mpmath():
    rng = np.random.default_rng(2024)
    for i in range(40):
        na, nb = rng.integers(2, 30, size=2)
        a = rng.normal(0, rng.uniform(0.1, 3), na)
        b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), nb)
        assert abs(welch_t(a, b).p_value - float(oracles.welch_mp(a, b))) < 1e-10
        assert abs(one_sample_t(a, 0.3).p_value - float(oracles.one_sample_mp(a, 0.3))) < 1e-10


@given(st.lists(finite, min_size=2, max_size=30), st.lists(finite, min_size=2, max_size=30))
def test_welch_p_in_unit_interval(a, b):
    r = welch_t(a, b)
    assert 0.0 <= r.p_value <= 1.0
    if r.df is not None:
        assert r.df > 0


@given(st.lists(finite, min_size=2, max_size=30), st.lists(finite, min_size=2, max_size=30))
def test_welch_antisymmetric(a, b):
    r1, r2 = welch_t(a, b), welch_t(b, a)
    assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)
    if math.isfinite(r1.statistic):
        assert r1.statistic == pytest.approx(-r2.statistic, abs=1e-9)


# --- Benjamini-Hochberg -------------------------------------------------------


def test_bh_examples():
    assert bh_adjust([0.03]).adjusted_p[0] == 0.03
    r = bh_adjust([0.01, 0.02, 0.03, 0.04], 0.05)
    assert r.rejected.all()
    np.testing.assert_array_equal(r.adjusted_p, oracles.bh_brute([0.01, 0.02, 0.03, 0.04]))
    assert not bh_adjust([1.0] * 5).rejected.any()


def test_bh_rejects_bad_input():
    with pytest.raises(ValueError):
        bh_adjust([0.1, 1.2])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60))
def test_bh_matches_brute_force(p):
    r = bh_adjust(p)
    np.testing.assert_array_equal(r.adjusted_p, oracles.bh_brute(p))
    assert np.all(r.adjusted_p[r.rejected] <= r.alpha)
    srt = r.adjusted_p[np.argsort(p, kind="stable")]
    assert np.all(np.diff(srt) >= 0)


# --- Fisher -------------------------------------------------------------------


def test_fisher_examples():
    assert fisher_exact([[1, 1], [1, 1]]).p_value == 1.0
    assert fisher_exact([[5, 0], [0, 5]]).p_value == pytest.approx(1 / 126, abs=1e-15)
    assert fisher_exact([[0, 0], [3, 4]]).p_value == 1.0
    assert fisher_exact([[3, 0], [4, 0]]).p_value == 1.0


def test_fisher_double_and_one_sided():
    tables = oracles._margin_tables(8, 8, 9)
    upper = float(sum(p for x, p in tables.items() if x >= 7))
    assert fisher_exact([[7, 1], [2, 6]], alternative="greater").p_value == pytest.approx(upper, abs=1e-15)
    lo =fisher_exact([[7, 1], [2, 6]], alternative="less").p_value
    hi = fisher_exact([[7, 1], [2, 6]], alternative="greater").p_value
    dbl = fisher_exact([[7, 1], [2, 6]], method="double").p_value
    assert dbl == pytest.approx(min(1.0, 2 * min(lo, hi)), abs=1e-15)


@given(st.tuples(*[st.integers(0, 12)] * 4).filter(lambda t: sum(t) > 0))
def test_fisher_matches_enumeration(t):
    a, b, c, d = t
    assert abs(fisher_exact([[a, b], [c, d]]).p_value - oracles.fisher_enumerate(a, b, c, d)) < 1e-12


def test_fisher_against_scipy_sample():
    from scipy.stats import fisher_exact as sp_fisher

    rng = np.random.default_rng(9)
    for _ in range(300):
        t = rng.integers(0, 15, size=(2, 2))
        if t.sum() == 0:
            continue
        assert fisher_exact(t).p_value == pytest.approx(sp_fisher(t)[1], abs=1e-9)


# --- correlation and equivalence ----------------------------------------------


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-15)
    x = [0.3, 1.9, -0.2, 4.0, 2.2, 0.7]
    y = [1.0, 2.1, 0.4, 3.3, 2.9, 0.1]
    assert pearson_r(x, y) == pytest.approx(oracles.pearson_cov(x, y), abs=1e-14)
    with pytest.raises(UndefinedCorrelation):
        pearson_r([1, 1, 1], [1, 2, 3])


@given(
    st.lists(st.tuples(finite, finite), min_size=3, max_size=40),
    st.floats(0.1, 50), st.floats(-100, 100), st.floats(0.1, 50), st.floats(-100, 100),
)
def test_pearson_affine_invariance(pairs, sa, ba, sb, bb):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r = pearson_r(x, y)
    assert -1.0 <= r <= 1.0
    assert pearson_r(sa * x + ba, sb * y + bb) == pytest.approx(r, abs=1e-9)


def test_tost_examples():
    r = tost_equivalence(0.0, 200, 0.3)
    assert r.p_value < 0.001
    assert r.p_value == pytest.approx(TOST_R0_N200, rel=1e-9)
    r = tost_equivalence(0.0, 5, 0.3)
    assert r.p_value > 0.05
    assert r.p_value == pytest.approx(TOST_R0_N5, rel=1e-9)
    assert tost_equivalence(0.3, 50, 0.3).p_value >= 0.5
    assert tost_equivalence(-0.3, 50, 0.3).p_value >= 0.5
    assert tost_equivalence(1.0, 50, 0.3).degenerate


@given(st.floats(-0.999, 0.999), st.integers(4, 500))
def test_tost_symmetric_in_sign(r, n):
    assert tost_equivalence(r, n).p_value == pytest.approx(tost_equivalence(-r, n).p_value, abs=1e-15)


# --- logistic probe -----------------------------------------------------------


def _fd_grad(params, X, y, sw, l2, h=1e-6):
    g = np.empty_like(params)
    for i in range(len(params)):
        e = np.zeros_like(params)
        e[i] = h
        g[i] = (logistic_loss(params + e, X, y, sw, l2) - logistic_loss(params - e, X, y, sw, l2)) / (2 * h)
    return g


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 5))
    y = (X[:, 0] + rng.normal(scale=1.5, size=80) > 0).astype(float)
    sw = sample_weights(y, True)
    for params in (rng.normal(size=6), np.zeros(6), rng.normal(size=6) * 3):
        g = logistic_grad(params, X, y, sw, 0.05)
        fd = _fd_grad(params, X, y, sw, 0.05)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_logistic_separable_and_single_class():
    x = np.linspace(-3, 3, 100)
    m = fit_logistic(x, (x > 0).astype(int), l2=1e-4)
    assert m.validation_accuracy == 1.0
    with pytest.raises(FitError):
        fit_logistic(x, np.zeros(100, dtype=int))


def test_logistic_matches_newton_oracle():
    rng = np.random.default_rng(17)
    x = rng.normal(size=200)
    y = (rng.uniform(size=200) < 1 / (1 + np.exp(-(1.5 * x - 0.3)))).astype(int)
    m = fit_logistic(x, y, l2=0.1, class_weighted=True)
    tr = m.train_index
    theta = oracles.newton_logistic(x[tr, None], y[tr].astype(float), sample_weights(y[tr], True), 0.1)
    assert abs(m.weights[0] - theta[0]) < 1e-4
    assert abs(m.bias - theta[1]) < 1e-4


def test_logistic_holdout_is_disjoint_and_seeded():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(150, 3))
    y = (X[:, 1] > 0).astype(int)
    a = fit_logistic(X, y, seed=4)
    b = fit_logistic(X, y, seed=4)
    assert not set(a.train_index) & set(a.val_index)
    assert len(a.train_index) + len(a.val_index) == 150
    np.testing.assert_array_equal(a.weights, b.weights)


# --- SVD ----------------------------------------------------------------------


def test_svd_examples():
    np.testing.assert_allclose(svd_spectrum(np.diag([3.0, 1.0])).singular_values, [3.0, 1.0], atol=1e-15)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    np.testing.assert_allclose(svd_spectrum(q).singular_values, np.ones(6), atol=1e-12)
    A = np.random.default_rng(1).normal(size=(50, 8))
    sv = svd_spectrum(A).singular_values
    assert np.sum(sv**2) == pytest.approx(np.sum(A**2), rel=1e-8)


@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31))
def test_svd_properties(rows, cols, seed):
    A = np.random.default_rng(seed).normal(size=(rows, cols))
    sv = svd_spectrum(A).singular_values
    assert len(sv) <= min(rows, cols)
    assert np.all(sv >= 0) and np.all(np.diff(sv) <= 0)
    assert np.sum(sv**2) == pytest.approx(np.sum(A**2), rel=1e-8)
    np.testing.assert_allclose(sv, np.linalg.svd(A, compute_uv=False)[: len(sv)], rtol=1e-8, atol=1e-12)
