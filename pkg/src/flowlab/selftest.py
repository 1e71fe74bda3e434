"""Fast self-checks: closed-form identities, gradient checks, a small MC run."""

from __future__ import annotations

import time

import numpy as np

from . import linear_theory as lt
from . import trainers as tr
from . import weighting as wt
from .bench import hardest_indices


def _rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_weights_example():
    wv = wt.flow_weights([0.0, 1.0, 2.0], "median")
    want = np.exp(-np.array([0.0, 1.0, 2.0]))
    return wv.tau == 1.0 and np.allclose(wv.values, want, rtol=0, atol=1e-15), f"tau={wv.tau}"


def check_median_even():
    tau = wt.select_temperature([1.0, 2.0, 3.0, 10.0], "median")
    return tau == 2.5, f"tau={tau}"


def check_degenerate():
    wv = wt.flow_weights([0.0, 0.0, 0.0])
    return wv.tau is None and np.all(wv.values == 1.0), "all-zero losses give uniform weights"


def check_entropic_optimality():
    rng = np.random.default_rng(1)
    worst = np.inf
    for _ in range(20):
        n = int(rng.integers(2, 11))
        losses = rng.exponential(1.0, n)
        tau = float(rng.uniform(0.1, 3.0))
        pi = wt.normalize_weights(wt.compute_weights(losses, tau).values)
        g_star = wt.entropic_objective(pi, losses, tau)
        others = rng.dirichlet(np.ones(n), 500)
        g = np.array([wt.entropic_objective(p, losses, tau) for p in others])
        worst = min(worst, float(np.min(g - g_star)))
    return worst >= -1e-12, f"min gap={worst:.3e}"


def check_mu_beta_roundtrip():
    err = 0.0
    for beta in (0.05, 0.3, 0.9):
        for rho in (0.0, 0.4, 0.8):
            tau = lt.beta_to_tau(beta, rho, 1.7)
            err = max(err, abs(lt.mu_from_tau(tau, 1.7) - lt.beta_to_mu(beta, rho)))
    return err < 1e-12, f"max err={err:.3e}"


def check_eigen_numeric():
    err = 0.0
    below = True
    for beta in np.linspace(0.1, 1.0, 10):
        for rho in np.linspace(0.05, 0.95, 10):
            sp = lt.q_eigen(beta, rho)
            vals, vecs = np.linalg.eigh(lt.q_reduced_matrix(beta, rho))
            err = max(err, abs(vals[1] - sp.lambda1), abs(vals[0] - sp.lambda2))
            err = max(err, 1 - abs(vecs[:, 1] @ sp.v1), 1 - abs(vecs[:, 0] @ sp.v2))
            below &= sp.lambda2 < rho**2 * sp.lambda1
    return err < 1e-10 and below, f"max err={err:.3e}, lambda2 < rho^2 lambda1: {below}"


def check_general_vs_closed():
    spec = lt.make_task(5, 0.6, 1.3, seed=3)
    tau = 0.7
    a = lt.weighted_covariance_closed(spec, tau)
    b = lt.weighted_covariance_general(spec.sigma_tilde, spec.e, tau)
    err = float(np.max(np.abs(a - b)))
    return err < 1e-10, f"max err={err:.3e}"


def check_mc_small():
    spec = lt.make_task(3, 0.5, 1.0, seed=0)
    tau = 1.0
    closed = lt.weighted_covariance_closed(spec, tau)
    mc = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, tau, 100_000, seed=7)
    err = float(np.max(np.abs(mc - closed)))
    return err <= 2e-2, f"max err={err:.3e} (1e5 samples)"


def check_vanilla_trajectory():
    spec = lt.make_task(6, 0.5, 1.5, seed=2)
    closed = lt.vanilla_ft_trajectory(spec, 0.5, 40)
    sim = lt.simulate_gd(spec.sigma_tilde, spec.theta_pre, spec.theta_ft, 0.5, 40)
    err = float(np.max(np.abs(closed.thetas - sim.thetas)))
    return err < 1e-12, f"max err={err:.3e}"


def check_flow_trajectory():
    spec = lt.make_task(6, 0.5, 1.5, seed=2)
    beta = 0.25
    closed = lt.flow_trajectory(spec, beta, 40)
    sigma = lt.weighted_covariance_closed(spec, closed.tau)
    sim = lt.simulate_gd(sigma, spec.theta_pre, spec.theta_ft, closed.eta, 40)
    err = float(np.max(np.abs(closed.thetas - sim.thetas)))
    return err < 1e-8, f"max err={err:.3e}"


def check_averaging_closed_form():
    spec = lt.make_task(4, 0.5, 1.0, seed=0, sigma_pre=np.diag([4.0, 1, 1, 1]))
    omega, err_star = lt.optimal_averaging(spec)
    grid = np.linspace(0, 1, 2001)
    errs = [lt.population_errors(lt.model_average(spec, w), spec)[2] for w in grid]
    gap = abs(min(errs) - err_star)
    return gap < 1e-6 and err_star < spec.gap_norm**2, f"omega*={omega:.4f} gap={gap:.2e}"


def check_ce_gradient():
    rng = np.random.default_rng(4)
    model = tr.MultiHeadModel.init(3, 4, {"A": 3}, seed=1)
    X = rng.normal(size=(7, 3))
    y = rng.integers(0, 3, 7)
    w = rng.uniform(0.1, 2.0, 7)
    _, grads = tr.ce_objective(model, X, y, "A", w)
    worst = 0.0
    for part, name, block in (("body", "W", model.body), ("head", "W", model.heads["A"])):

        def f(p, part=part, name=name):
            m = model.copy()
            (m.body if part == "body" else m.heads["A"])[name] = p
            return tr.ce_objective(m, X, y, "A", w)[0]

        num = central_diff(f, block[name])
        worst = max(worst, _rel_err(grads[part][name], num))
    return worst < 1e-5, f"max rel err={worst:.3e}"


def check_linear_logistic_gradient():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(9, 4))
    theta = rng.normal(size=4)
    w = rng.uniform(0.1, 2.0, 9)
    y = X @ rng.normal(size=4) + 0.1 * rng.normal(size=9)
    yb = (rng.uniform(size=9) < 0.5).astype(float)
    worst = 0.0
    for obj, target in ((tr.squared_objective, y), (tr.logistic_objective, yb)):
        _, g = obj(theta, X, target, w)
        num = central_diff(lambda t, obj=obj, target=target: obj(t, X, target, w)[0], theta)
        worst = max(worst, _rel_err(g, num))
    return worst < 1e-5, f"max rel err={worst:.3e}"


def check_l2_gradient():
    rng = np.random.default_rng(6)
    p = {"W": rng.normal(size=(3, 2))}
    a = {"W": rng.normal(size=(3, 2))}
    _, g = tr.l2_penalty(p, a, 0.3)
    num = central_diff(lambda x: tr.l2_penalty({"W": x}, a, 0.3)[0], p["W"])
    err = _rel_err(g["W"], num)
    return err < 1e-5, f"rel err={err:.3e}"


def check_hard_selection():
    idx = hardest_indices([0.1, 0.9, 0.5, 0.9, 0.2], 0.4)
    sel = [int(i) for i in idx]
    return sel == [1, 3], f"selected={sel}"


CHECKS = [
    ("weights_example", check_weights_example),
    ("median_even_n", check_median_even),
    ("degenerate_uniform", check_degenerate),
    ("entropic_optimality", check_entropic_optimality),
    ("mu_beta_roundtrip", check_mu_beta_roundtrip),
    ("eigen_vs_numeric", check_eigen_numeric),
    ("general_vs_closed_covariance", check_general_vs_closed),
    ("mc_covariance_1e5", check_mc_small),
    ("vanilla_trajectory", check_vanilla_trajectory),
    ("flow_trajectory", check_flow_trajectory),
    ("averaging_closed_form", check_averaging_closed_form),
    ("ce_gradient", check_ce_gradient),
    ("linear_logistic_gradient", check_linear_logistic_gradient),
    ("l2_gradient", check_l2_gradient),
    ("hard_sample_selection", check_hard_selection),
]


def run_selftest(out=print) -> bool:
    """Run every check, report one line each, return overall success."""
    ok_all = True
    t0 = time.perf_counter()
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    out(f"{len(CHECKS)} checks, {'all passed' if ok_all else 'FAILURES'} in {time.perf_counter() - t0:.1f}s")
    return ok_all
