import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medmod.errors import DimensionMismatch, NonConvergence, ZeroDf
from medmod.pathfit import (
    BKParams,
    MeMoParams,
    PathModel,
    SemFit,
    bfgs,
    bk_model,
    chi2_sf,
    discrepancy,
    discrepancy_gradient,
    fit_indices,
    fit_ml,
    fit_model_to_data,
    implied_covariance,
    independence_fit,
    memo_model,
    model_covariance,
    reduced_form,
    two_stage,
)
from medmod.simulate import Condition, CorrelationSpec, GeneratingModel, replication_dataset


def simple():
    return PathModel(("x", "y"), (("y", ("x",)),))


def test_implied_identity():
    np.testing.assert_allclose(implied_covariance(simple(), [0.0, 1.0, 1.0]), np.eye(2))


def test_implied_single_path():
    S = implied_covariance(simple(), [2.0, 1.0, 1.0])
    np.testing.assert_allclose(S, [[1, 2], [2, 5]])


def test_unpack_checks_length():
    with pytest.raises(DimensionMismatch):
        simple().unpack([1.0, 2.0])


def test_model_validation():
    with pytest.raises(ValueError):
        PathModel(("x", "y"), (("y", ("x",)), ("x", ("y",))))
    with pytest.raises(ValueError):
        PathModel(("x", "y"), (("y", ("q",)),))


def test_df_audit():
    for m in (bk_model(), memo_model(), memo_model(w_on_x=False)):
        assert m.n_moments == 15
        assert m.n_params == 13
        assert m.df == 2


def test_saturated_fit_is_exact():
    S = np.array([[2.0, 0.6], [0.6, 1.5]])
    fit = fit_ml(simple(), S, 100)
    assert fit.df == 0
    assert fit.f_min == pytest.approx(0, abs=1e-12)
    assert fit.chi2 == pytest.approx(0, abs=1e-9)
    assert fit.gfi == pytest.approx(1.0, abs=1e-10)
    assert fit.estimates()["y<-x"] == pytest.approx(0.3, abs=1e-8)


def memo_truth():
    m = memo_model()
    theta = np.array([0.5, 0.3, 0.2, 0.1, 0.4, -0.3, 1.0, 1.0, 1.2, 0.4, 0.1, 0.8, 0.9])
    return m, theta


def bk_truth():
    m = bk_model()
    theta = np.array([0.4, 0.3, 0.2, 0.2, 0.5, 1.0, 1.0, 1.2, 0.4, 0.2, 0.1, 0.8, 0.9])
    return m, theta


@pytest.mark.parametrize("truth", [memo_truth, bk_truth])
def test_self_consistency(truth):
    m, theta = truth()
    S = implied_covariance(m, theta)
    fit = fit_ml(m, S, 250)
    assert fit.converged
    assert fit.f_min < 1e-10
    np.testing.assert_allclose(fit.params, theta, atol=1e-6)
    assert fit.tli >= 1.0 - 1e-9
    assert fit.gfi == pytest.approx(1.0, abs=1e-8)
    assert fit.agfi == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("truth", [memo_truth, bk_truth])
def test_gradient_matches_finite_differences(truth):
    m, theta = truth()
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    S = A @ A.T / 5 + np.eye(5)
    g = discrepancy_gradient(m, theta, S)
    h = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (discrepancy(m, theta + e, S) - discrepancy(m, theta - e, S)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_discrepancy_rejects_non_pd():
    m, theta = memo_truth()
    theta = theta.copy()
    theta[-1] = -5.0
    assert discrepancy(m, theta, np.eye(5)) == math.inf


def memo_data(seed=0, n=250):
    cond = Condition(n, GeneratingModel(beta_wx=-0.2), CorrelationSpec(rho_zw=0.3), nrun=1, seed=seed)
    return replication_dataset(cond, 0)


def test_history_is_monotone():
    fit = fit_model_to_data(memo_data(), "memo")
    assert fit.converged
    assert all(b <= a for a, b in zip(fit.history, fit.history[1:]))


def test_scale_invariance():
    d = memo_data(1)
    fit = fit_model_to_data(d, "bk", mediator="w")
    scaled = d.with_columns(x=3.0 * d["x"], y=0.5 * d["y"])
    fit2 = fit_model_to_data(scaled, "bk", mediator="w")
    assert fit2.chi2 == pytest.approx(fit.chi2, rel=1e-6)


def test_fit_index_examples():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    S = A @ A.T / 5 + np.eye(5)
    base = independence_fit(S, 200)
    assert base.df == 10
    m, _ = memo_truth()
    fake = fit_ml(m, S, 200)
    # a fit with the baseline's chi2/df ratio has TLI = 0
    same_ratio = SemFit(m, fake.params, fake.sigma, 0.0, base.chi2 * 2 / 10, 2, 0.0, 200)
    assert fit_indices(same_ratio, S, fake.sigma, base)[2] == pytest.approx(0.0, abs=1e-10)
    gfi, agfi, tli = fit_indices(fake, S, S, base)
    assert gfi == pytest.approx(1.0) and agfi == pytest.approx(1.0)


def test_zero_df_indices():
    S = np.array([[2.0, 0.6], [0.6, 1.5]])
    fit = fit_ml(simple(), S, 100)
    with pytest.raises(ZeroDf):
        fit_indices(fit, S, fit.sigma, independence_fit(S, 100))


def test_chi2_sf_closed_forms():
    for x in (0.0, 0.3, 2.0, 7.5, 30.0):
        assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-13)
        assert chi2_sf(x, 1) == pytest.approx(math.erfc(math.sqrt(x / 2)), rel=1e-12, abs=1e-300)


def test_memo_beats_bk_on_memo_data():
    d = memo_data(2)
    memo = fit_model_to_data(d, "memo")
    bk = fit_model_to_data(d, "bk")
    assert memo.chi2 < bk.chi2
    assert memo.agfi > bk.agfi and memo.tli > bk.tli


def test_non_convergence():
    d = memo_data(4)
    fit = fit_model_to_data(d, "memo")
    _, S = model_covariance(d, "memo")
    short = fit_ml(memo_model(), S, d.n, maxiter=1)
    assert not short.converged and np.isfinite(short.chi2)
    with pytest.raises(NonConvergence) as err:
        fit_ml(memo_model(), S, d.n, maxiter=1, strict=True)
    assert err.value.fit is not None
    assert fit.converged


def test_bfgs_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    res = bfgs(lambda v: 0.5 * v @ A @ v - b @ v, lambda v: A @ v - b, np.zeros(2))
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)


coef = st.floats(-2, 2)


@settings(max_examples=100)
@given(st.lists(coef, min_size=7, max_size=7), st.integers(0, 10_000))
def test_bk_reduced_form(vals, seed):
    q = BKParams(*vals)
    rng = np.random.default_rng(seed)
    x, z, e1, e2 = rng.normal(size=(4, 50))
    rf = reduced_form("bk", q)
    np.testing.assert_allclose(rf.evaluate(x, z, e1, e2), two_stage("bk", q, x, z, e1, e2), atol=1e-9)


@settings(max_examples=100)
@given(st.lists(coef, min_size=7, max_size=7), st.integers(0, 10_000))
def test_memo_reduced_form(vals, seed):
    q = MeMoParams(*vals)
    rng = np.random.default_rng(seed)
    x, z, e1, e2 = rng.normal(size=(4, 50))
    rf = reduced_form("memo", q)
    np.testing.assert_allclose(rf.evaluate(x, z, e1, e2), two_stage("memo", q, x, z, e1, e2), atol=1e-9)
    assert rf.coef["zx"] == q.b_ywx * q.b_wz
    assert rf.coef["e_med*x"] == q.b_ywx


def test_w_on_z_only_misfits_direct_wx_correlation():
    d = memo_data(5)
    full = fit_model_to_data(d, "memo")
    short = fit_model_to_data(d, "memo", w_on_x=False)
    assert short.df == full.df == 2
    assert short.chi2 > full.chi2 + 10
