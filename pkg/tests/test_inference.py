import math

import numpy as np
import pytest
from conftest import make_dataset
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import chi2_quantile_mp, chi2_sf_mp, normal_quantile_mp

from conslasso.core import Dataset, TuningConfig
from conslasso.errors import InputError, SingularityError
from conslasso.inference import (
    SandwichMatrix,
    chi2_test,
    confidence_intervals,
    delta_remainder,
    desparsify,
    desparsify_kkt_form,
    infer,
    normal_quantile,
    sandwich_covariance,
    studentized_statistic,
)
from conslasso.nodewise import ThetaRows, build_theta_rows
from conslasso.pipeline import fit_conservative


def test_normal_quantile_against_mpmath():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    for q in (0.5, 0.9, 0.975, 0.995, 1e-6):
        assert normal_quantile(q) == pytest.approx(normal_quantile_mp(q), rel=1e-13)


def test_interval_half_width_example():
    M = SandwichMatrix((0,), np.array([[4.0]]))
    ci = confidence_intervals(np.array([1.0]), M, 100, 0.05)
    half = normal_quantile_mp(0.975) * 2.0 / 10.0
    np.testing.assert_allclose(ci, [[1 - half, 1 + half]], rtol=1e-13)


@given(st.floats(0.01, 100.0), st.integers(2, 10_000))
def test_interval_width_scales_with_sigma(s, n):
    a = confidence_intervals(np.zeros(1), SandwichMatrix((0,), np.array([[s]])), n)
    b = confidence_intervals(np.zeros(1), SandwichMatrix((0,), np.array([[2 * s]])), n)
    assert np.diff(b)[0, 0] == pytest.approx(math.sqrt(2) * np.diff(a)[0, 0], rel=1e-12)


def test_chi2_pvalue_at_critical_value():
    crit = chi2_quantile_mp(0.95, 2)
    assert crit == pytest.approx(5.991464547107979, rel=1e-12)
    # statistic n d'M^-1 d = crit with M = I, n = 1
    d = np.array([math.sqrt(crit), 0.0])
    r = chi2_test(d, [0.0, 0.0], SandwichMatrix((0, 1), np.eye(2)), 1)
    assert r.statistic == pytest.approx(crit, rel=1e-13)
    assert r.dof == 2
    assert r.pvalue == pytest.approx(0.05, abs=1e-12)


@settings(max_examples=30)
@given(st.floats(0.0, 40.0), st.integers(1, 6))
def test_chi2_pvalue_against_mpmath(stat, h):
    d = np.zeros(h)
    d[0] = math.sqrt(stat)
    r = chi2_test(d, np.zeros(h), SandwichMatrix(tuple(range(h)), np.eye(h)), 1)
    assert r.pvalue == pytest.approx(chi2_sf_mp(stat, h), rel=1e-10, abs=1e-300)


def test_chi2_single_coordinate_is_squared_z():
    M = SandwichMatrix((3,), np.array([[2.5]]))
    b, null, n = np.array([0.7]), [0.2], 50
    r = chi2_test(b, null, M, n)
    z = studentized_statistic(np.array([1.0]), b, np.array(null), M, n)
    assert r.statistic == pytest.approx(z**2, rel=1e-13)


def test_chi2_rejects_singular_and_wrong_arity():
    M = SandwichMatrix((0, 1), np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularityError):
        chi2_test(np.zeros(2), [0, 0], M, 10)
    with pytest.raises(InputError):
        chi2_test(np.zeros(2), [0], SandwichMatrix((0, 1), np.eye(2)), 10)


def test_zero_variance_interval_raises():
    with pytest.raises(SingularityError):
        confidence_intervals(np.zeros(1), SandwichMatrix((0,), np.zeros((1, 1))), 10)
    with pytest.raises(InputError):
        confidence_intervals(np.zeros(1), SandwichMatrix((0,), np.eye(1)), 10, 1.5)


def manual_theta(rows, H):
    return ThetaRows(tuple(H), np.atleast_2d(rows), np.ones(len(H)), 0.0, "manual", ())


def test_zero_residuals_give_zero_sandwich():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    beta = np.array([1.0, 0.0, -1.0])
    ds = Dataset(X, X @ beta)
    theta = manual_theta(np.eye(3)[:2], [0, 1])
    assert not sandwich_covariance(ds, beta, theta).values.any()
    np.testing.assert_allclose(desparsify(ds, beta, theta), beta[:2], atol=1e-14)


def test_sandwich_matches_explicit_meat(small):
    ds, _ = small
    cf = fit_conservative(ds)
    theta = build_theta_rows(ds, [0, 4, 7])
    u = ds.Y - ds.X @ cf.beta
    meat = (ds.X * u[:, None] ** 2).T @ ds.X / ds.n
    ref = theta.rows @ meat @ theta.rows.T
    np.testing.assert_allclose(sandwich_covariance(ds, cf, theta).values, ref, atol=1e-12)


def test_single_observation_formula():
    # two rows so Dataset accepts it, but the second row carries zero weight
    X = np.array([[2.0, 1.0], [0.0, 0.0]])
    Y = np.array([3.0, 0.0])
    ds = Dataset(X, Y)
    theta = manual_theta(np.array([[0.5, 0.25]]), [0])
    M = sandwich_covariance(ds, np.zeros(2), theta)
    # n^-1 (Theta'X_1)^2 u_1^2 = (1 + 0.25)^2 * 9 / 2
    assert M.values[0, 0] == pytest.approx(1.25**2 * 9 / 2)


def test_ols_fixed_point_with_exact_inverse():
    ds, _ = make_dataset(200, 5, seed=4)
    ols = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0]
    inv = np.linalg.inv(ds.X.T @ ds.X / ds.n)
    theta = manual_theta(inv[[1, 3]], [1, 3])
    np.testing.assert_allclose(desparsify(ds, ols, theta), ols[[1, 3]], atol=1e-12)
    # any starting point lands on OLS when Theta is the exact inverse
    np.testing.assert_allclose(desparsify(ds, np.zeros(5), theta), ols[[1, 3]], atol=1e-10)


def test_delta_vanishes_with_exact_inverse_and_obeys_hoelder(small):
    ds, beta0 = small
    inv = np.linalg.inv(ds.X.T @ ds.X / ds.n)
    theta = manual_theta(inv[[0, 2]], [0, 2])
    cf = fit_conservative(ds)
    assert delta_remainder(ds, cf, theta, beta0).max_abs < 1e-10
    approx = build_theta_rows(ds, [0, 2])
    rep = delta_remainder(ds, cf, approx, beta0)
    assert rep.max_abs <= rep.bound * (1 + 1e-12)


def test_sandwich_is_psd(wide):
    ds, _ = wide
    cf = fit_conservative(ds)
    theta = build_theta_rows(ds, list(range(6)))
    M = sandwich_covariance(ds, cf, theta).values
    np.testing.assert_array_equal(M, M.T)
    assert np.linalg.eigvalsh(M).min() >= -1e-12


@pytest.mark.parametrize("method", ["lasso", "conservative"])
def test_kkt_form_matches_residual_form(wide, method):
    ds, _ = wide
    cf = fit_conservative(ds)
    theta = build_theta_rows(ds, [0, 1, 30], method=method)
    a = desparsify(ds, cf, theta)
    b = desparsify_kkt_form(ds, cf, theta)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_studentized_alpha_support():
    M = SandwichMatrix((1, 4), np.diag([1.0, 4.0]))
    b, null = np.array([0.3, 0.4]), np.zeros(2)
    full = np.zeros(6)
    full[4] = 1.0
    z = studentized_statistic(full, b, null, M, 100)
    assert z == pytest.approx(10 * 0.4 / 2)
    bad = np.zeros(6)
    bad[2] = 1.0
    with pytest.raises(InputError):
        studentized_statistic(bad, b, null, M, 100)
    with pytest.raises(InputError):
        studentized_statistic(np.array([1.0, 1.0]), b, null, M, 100)


def test_infer_report(small):
    ds, beta0 = small
    cf = fit_conservative(ds)
    rep = infer(ds, cf, [0, 1], TuningConfig(), null_values=beta0[:2], delta=0.1)
    assert rep.level == pytest.approx(0.9)
    assert rep.intervals.shape == (2, 2)
    assert np.all(rep.intervals[:, 0] < rep.b_hat) and np.all(rep.b_hat < rep.intervals[:, 1])
    d = rep.to_dict()
    assert d["H"] == [1, 2]
    assert d["chi2"]["dof"] == 2
    assert 0 <= d["chi2"]["pvalue"] <= 1
    again = infer(ds, cf, [0, 1], theta=rep.theta, null_values=beta0[:2], delta=0.1)
    np.testing.assert_array_equal(again.b_hat, rep.b_hat)
    assert '"pvalue"' in rep.to_json()
