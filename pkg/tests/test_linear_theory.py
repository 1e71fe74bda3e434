import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import linear_theory as lt
from flowlab.exceptions import (
    DimensionMismatchError,
    DimensionTooSmallError,
    DivergenceError,
    NonPositiveTemperatureError,
    NotPositiveDefiniteError,
    OutOfRangeError,
)

beta_st = st.floats(0.01, 1.0)
rho_st = st.floats(0.0, 0.95)


def test_make_task_invariants():
    spec = lt.make_task(6, 0.4, 2.5, seed=1)
    assert spec.gap_norm == pytest.approx(2.5)
    assert spec.e_bar @ spec.e_perp == pytest.approx(0.0, abs=1e-15)
    B = spec.basis()
    np.testing.assert_allclose(B.T @ B, np.eye(6), atol=1e-12)
    np.testing.assert_array_equal(B[:, 0], spec.e_bar)


def test_make_task_is_seeded():
    a = lt.make_task(4, 0.3, 1.0, seed=5)
    b = lt.make_task(4, 0.3, 1.0, seed=5)
    np.testing.assert_array_equal(a.theta_ft, b.theta_ft)


def test_perpendicular_choice_skips_aligned_axes():
    e = np.array([0.95, math.sqrt(1 - 0.95**2), 0.0])
    p = lt.perpendicular_unit(e)
    assert abs(p @ e) < 1e-15
    assert p[2] == 0.0 and p[1] > 0  # built from the second axis, not the first


@pytest.mark.parametrize(
    "kwargs, exc",
    [
        (dict(d=1, rho=0.1, gap_norm=1.0, seed=0), DimensionTooSmallError),
        (dict(d=3, rho=1.0, gap_norm=1.0, seed=0), OutOfRangeError),
        (dict(d=3, rho=0.1, gap_norm=0.0, seed=0), OutOfRangeError),
        (dict(d=3, rho=0.1, gap_norm=1.0, seed=0, sigma_pre=np.diag([0.5, 1, 1])), NotPositiveDefiniteError),
        (dict(d=3, rho=0.1, gap_norm=1.0, seed=0, sigma_pre=np.eye(2)), DimensionMismatchError),
    ],
)
def test_invalid_specs_rejected(kwargs, exc):
    with pytest.raises(exc):
        lt.make_task(**kwargs)


def test_general_form_reduces_to_structured_form():
    for rho in (0.0, 0.3, 0.8):
        spec = lt.make_task(5, rho, 1.7, seed=3, direction=[1, 2, 0, -1, 0.5])
        for tau in (0.1, 1.0, 10.0):
            a = lt.weighted_covariance_closed(spec, tau)
            b = lt.weighted_covariance_general(spec.sigma_tilde, spec.e, tau)
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_general_form_on_arbitrary_covariance_matches_mc():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    sigma = A @ A.T + np.eye(3)
    e = np.array([0.7, -0.2, 0.4])
    closed = lt.weighted_covariance_general(sigma, e, 0.8)
    mc = lt.weighted_covariance_mc(sigma, e, 0.8, 1_000_000, seed=3)
    assert np.max(np.abs(mc - closed)) < 1e-2


def test_mc_samplers_agree_with_each_other_and_closed_form():
    spec = lt.make_task(4, 0.6, 1.0, seed=0)
    tau = 0.9
    closed = lt.weighted_covariance_closed(spec, tau)
    a = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, tau, 400_000, seed=1)
    b = lt.weighted_covariance_mc_basis(spec, tau, 400_000, seed=2)
    assert np.max(np.abs(a - closed)) < 1e-2
    assert np.max(np.abs(b - closed)) < 1e-2


def test_mc_is_bit_identical_across_thread_counts(monkeypatch):
    spec = lt.make_task(3, 0.5, 1.0, seed=0)
    one = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, 1.0, 300_000, seed=9, threads=1)
    four = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, 1.0, 300_000, seed=9, threads=4)
    monkeypatch.setenv("FLOWLAB_THREADS", "3")
    env = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, 1.0, 300_000, seed=9)
    np.testing.assert_array_equal(one, four)
    np.testing.assert_array_equal(one, env)


def test_mc_rejects_bad_inputs():
    with pytest.raises(NotPositiveDefiniteError):
        lt.weighted_covariance_mc(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2), 1.0, 10, 0)
    with pytest.raises(NonPositiveTemperatureError):
        lt.weighted_covariance_mc(np.eye(2), np.ones(2), 0.0, 10, 0)


@settings(max_examples=200, deadline=None)
@given(beta_st, rho_st, st.floats(0.1, 10.0))
def test_beta_tau_mu_round_trip(beta, rho, gap):
    tau = lt.beta_to_tau(beta, rho, gap)
    assert lt.mu_from_tau(tau, gap) == pytest.approx(lt.beta_to_mu(beta, rho), rel=1e-12)


def test_mu_limits():
    assert lt.mu_from_tau(1e12, 1.0) == pytest.approx(1.0, abs=1e-11)
    assert lt.mu_from_tau(1e-12, 1.0) < 1e-6
    assert lt.beta_to_mu(1.0, 0.5) == pytest.approx(math.sqrt(0.5))


@settings(max_examples=300, deadline=None)
@given(beta_st, st.floats(0.01, 0.95))
def test_spectral_pair_is_an_eigendecomposition(beta, rho):
    sp = lt.q_eigen(beta, rho)
    A = lt.q_reduced_matrix(beta, rho)
    for lam, v in ((sp.lambda1, sp.v1), (sp.lambda2, sp.v2)):
        np.testing.assert_allclose(A @ v, lam * v, atol=1e-12)
        assert np.linalg.norm(v) == pytest.approx(1.0)
    assert sp.lambda2 < rho**2 * sp.lambda1
    assert 0 <= sp.lambda2 <= sp.lambda1 < 1


def test_spectral_identity_rebuilds_weighted_covariance():
    spec = lt.make_task(6, 0.45, 1.2, seed=8)
    for beta in (0.05, 0.5, 1.0):
        sp = lt.q_eigen(beta, spec.rho)
        tau = lt.beta_to_tau(beta, spec.rho, spec.gap_norm)
        v1, v2 = sp.embed(spec)
        Q = sp.lambda1 * np.outer(v1, v1) + sp.lambda2 * np.outer(v2, v2)
        np.testing.assert_allclose(sp.mu * (np.eye(6) - Q), lt.weighted_covariance_closed(spec, tau), atol=1e-10)


def test_eigen_spot_values():
    sp = lt.q_eigen(1.0, 0.5)
    assert sp.lambda1 == pytest.approx(0.625)
    assert sp.lambda2 == 0.0
    assert lt.q_eigen(0.01, 0.5).lambda1 == pytest.approx(1.0025 / 1.01, rel=1e-14)


def test_lambda1_decreasing_in_beta():
    vals = [lt.q_eigen(b, 0.5).lambda1 for b in np.linspace(0.001, 1, 200)]
    assert np.all(np.diff(vals) < 0)
    assert lt.q_eigen(1e-9, 0.5).lambda1 == pytest.approx(1.0, abs=1e-8)


def test_trajectory_rows_and_start():
    spec = lt.make_task(4, 0.5, 1.0, seed=0)
    tr = lt.flow_trajectory(spec, 0.25, 50)
    rows = list(tr.rows())
    assert len(rows) == 51
    assert rows[0][:4] == ["0", "flow", "1.0", "0.0"]
    assert lt.TRAJECTORY_HEADER == ["k", "method", "coef_e", "coef_eperp", "err1", "err2", "err_tot", "gamma"]
    np.testing.assert_allclose(tr.thetas[0], spec.theta_pre)
    van = lt.vanilla_ft_trajectory(spec, 0.5, 3)
    assert [r[-1] for r in van.rows()] == ["", "", "", ""]


def test_vanilla_even_odd_pattern():
    spec = lt.make_task(3, 0.5, 2.0, seed=1)
    tr = lt.vanilla_ft_trajectory(spec, 0.5, 6)
    np.testing.assert_allclose(tr.coef_e, [1, 0, 0.25, 0, 0.0625, 0, 0.015625])
    np.testing.assert_allclose(tr.coef_eperp, [0, -0.5, 0, -0.125, 0, -0.03125, 0])


def test_vanilla_general_step_matches_simulation():
    spec = lt.make_task(5, 0.3, 1.0, seed=1)
    tr = lt.vanilla_ft_trajectory(spec, 0.3, 30)
    sim = lt.simulate_gd(spec.sigma_tilde, spec.theta_pre, spec.theta_ft, 0.3, 30)
    np.testing.assert_allclose(tr.thetas, sim.thetas, atol=1e-12)


def test_flow_general_step_matches_simulation():
    spec = lt.make_task(5, 0.3, 1.0, seed=1)
    tr = lt.flow_trajectory(spec, 0.4, 30, eta=0.7)
    sig = lt.weighted_covariance_closed(spec, tr.tau)
    sim = lt.simulate_gd(sig, spec.theta_pre, spec.theta_ft, 0.7, 30)
    np.testing.assert_allclose(tr.thetas, sim.thetas, atol=1e-10)


def test_flow_approximation_converges_to_stalled_direction():
    spec = lt.make_task(4, 0.5, 1.0, seed=0)
    beta = 0.3
    tr = lt.flow_trajectory(spec, beta, 200)
    # the lambda2 component dies first, leaving gamma along e - beta rho |e| e_perp
    diff = tr.thetas - tr.approx_thetas
    ratio = np.linalg.norm(diff[-1]) / max(np.linalg.norm(tr.thetas[-1] - spec.theta_ft), 1e-300)
    assert ratio < 1e-6
    u = lt.stalled_direction(spec, beta)
    d = tr.thetas[40] - spec.theta_ft
    assert abs(abs(d @ u) / np.linalg.norm(d) - 1) < 1e-8


def test_flow_err2_decreases_and_vanilla_fine_tune_error_collapses():
    spec = lt.make_task(4, 0.5, 1.0, seed=0)
    flow = lt.flow_trajectory(spec, 0.01, 50)
    van = lt.vanilla_ft_trajectory(spec, 0.5, 50)
    assert np.all(np.diff(flow.err2) <= 1e-15)
    assert van.err2[50] < 1e-3 * spec.gap_norm**2
    # stalled FLOW keeps most of its distance from theta_pre small
    assert flow.err1[50] < van.err1[50]


def test_simulate_gd_diverges_loudly():
    with pytest.raises(DivergenceError):
        lt.simulate_gd(np.eye(2), np.ones(2), np.zeros(2), 5.0, 100)


def test_model_average_closed_form():
    spec = lt.make_task(3, 0.2, 1.5, seed=0, sigma_pre=np.diag([3.0, 1, 2]))
    omega, err = lt.optimal_averaging(spec)
    assert omega == pytest.approx(0.75)
    assert err == pytest.approx(0.75 * 2.25)
    np.testing.assert_allclose(lt.model_average(spec, 0.0), spec.theta_ft)
    np.testing.assert_allclose(lt.model_average(spec, 1.0), spec.theta_pre)
    with pytest.raises(OutOfRangeError):
        lt.model_average(spec, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(1.0, 5.0), st.integers(2, 6))
def test_averaging_beats_both_endpoints(rho, s, d):
    sigma = np.eye(d)
    sigma[0, 0] = s
    spec = lt.make_task(d, rho, 1.0, seed=0, sigma_pre=sigma)
    _, err = lt.optimal_averaging(spec)
    assert err < spec.gap_norm**2
    rep = lt.flow_beats_averaging_check(spec, np.linspace(0.05, 1.0, 20), 60)
    assert rep.flow_le_averaging and rep.beats_endpoints


def test_input_validation():
    spec = lt.make_task(3, 0.2, 1.0, seed=0)
    with pytest.raises(OutOfRangeError):
        lt.q_eigen(0.0, 0.5)
    with pytest.raises(OutOfRangeError):
        lt.flow_trajectory(spec, 0.5, -1)
    with pytest.raises(DimensionMismatchError):
        lt.population_errors(np.zeros(2), spec)
    with pytest.raises(NonPositiveTemperatureError):
        lt.weighted_covariance_closed(spec, -1.0)
