"""Linear pre-train / fine-tune model with Gaussian fine-tuning inputs.

The fine-tuning inputs have covariance ``I + rho (e e_perp^T + e_perp e^T)``
where ``e`` is the unit direction between the two ground truths. Under
loss-oriented weighting with temperature ``tau`` the effective covariance
becomes ``mu (I - Q)``; everything here is closed form, with Monte-Carlo and
plain gradient-descent routines kept as independent cross-checks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .exceptions import (
    DimensionMismatchError,
    DimensionTooSmallError,
    DivergenceError,
    NonPositiveTemperatureError,
    NotPositiveDefiniteError,
    OutOfRangeError,
)

MC_CHUNK = 65_536


@dataclass(frozen=True, eq=False)
class LinearTaskSpec:
    d: int
    theta_pre: np.ndarray
    theta_ft: np.ndarray
    e_bar: np.ndarray
    e_perp: np.ndarray
    rho: float
    sigma_pre: np.ndarray

    def __post_init__(self):
        if self.d < 2:
            raise DimensionTooSmallError(f"d must be >= 2, got {self.d}")
        for name in ("theta_pre", "theta_ft", "e_bar", "e_perp"):
            if np.shape(getattr(self, name)) != (self.d,):
                raise DimensionMismatchError(f"{name} must have shape ({self.d},)")
        if np.shape(self.sigma_pre) != (self.d, self.d):
            raise DimensionMismatchError(f"sigma_pre must be {self.d}x{self.d}")
        if not 0.0 <= self.rho < 1.0:
            raise OutOfRangeError(f"rho must lie in [0, 1), got {self.rho}")
        if abs(np.linalg.norm(self.e_bar) - 1.0) > 1e-12:
            raise OutOfRangeError("e_bar must be unit norm")
        if abs(np.linalg.norm(self.e_perp) - 1.0) > 1e-12:
            raise OutOfRangeError("e_perp must be unit norm")
        if abs(float(self.e_bar @ self.e_perp)) > 1e-12:
            raise OutOfRangeError("e_perp must be orthogonal to e_bar")
        gap = self.theta_pre - self.theta_ft
        if np.linalg.norm(gap) == 0.0 or np.linalg.norm(gap / np.linalg.norm(gap) - self.e_bar) > 1e-10:
            raise OutOfRangeError("e_bar must be the direction of theta_pre - theta_ft")
        if not np.allclose(self.sigma_pre, self.sigma_pre.T, atol=1e-12):
            raise NotPositiveDefiniteError("sigma_pre must be symmetric")
        if np.linalg.eigvalsh(self.sigma_pre).min() < 1.0 - 1e-9:
            raise NotPositiveDefiniteError("sigma_pre must satisfy sigma_pre >= I")

    @property
    def e(self) -> np.ndarray:
        return self.theta_pre - self.theta_ft

    @property
    def gap_norm(self) -> float:
        return float(np.linalg.norm(self.e))

    @property
    def sigma_tilde(self) -> np.ndarray:
        cross = np.outer(self.e_bar, self.e_perp)
        return np.eye(self.d) + self.rho * (cross + cross.T)

    def basis(self) -> np.ndarray:
        """Orthonormal basis with columns ``e_bar, e_perp, ...``."""
        m = np.column_stack([self.e_bar, self.e_perp, np.eye(self.d)])
        q, _ = np.linalg.qr(m)
        q = q[:, : self.d]
        # qr may flip signs; pin the first two columns exactly
        q[:, 0] = self.e_bar
        q[:, 1] = self.e_perp
        return q

    def coords(self, theta) -> tuple[float, float]:
        """Coefficients of ``theta - theta_ft`` on ``e`` and on ``|e| e_perp``."""
        diff = np.asarray(theta) - self.theta_ft
        g = self.gap_norm
        return float(diff @ self.e_bar) / g, float(diff @ self.e_perp) / g


def perpendicular_unit(e_bar: np.ndarray) -> np.ndarray:
    """Gram-Schmidt of the first basis vector with ``|<b, e_bar>| < 0.9``."""
    for i in range(len(e_bar)):
        if abs(e_bar[i]) < 0.9:
            b = np.zeros_like(e_bar)
            b[i] = 1.0
            v = b - (b @ e_bar) * e_bar
            return v / np.linalg.norm(v)
    raise DimensionTooSmallError("no usable basis vector")  # unreachable for d >= 2


def make_task(d: int, rho: float, gap_norm: float, seed: int, sigma_pre=None, direction=None) -> LinearTaskSpec:
    """Build a seeded task.

    ``theta_ft`` is standard normal; the gap direction defaults to the first
    coordinate axis (``direction`` overrides it) and ``theta_pre`` sits at
    distance ``gap_norm`` along it.
    """
    if d < 2:
        raise DimensionTooSmallError(f"d must be >= 2, got {d}")
    if not gap_norm > 0:
        raise OutOfRangeError(f"gap_norm must be > 0, got {gap_norm}")
    if not 0.0 <= rho < 1.0:
        raise OutOfRangeError(f"rho must lie in [0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    theta_ft = rng.standard_normal(d)
    if direction is None:
        e_bar = np.zeros(d)
        e_bar[0] = 1.0
    else:
        e_bar = np.asarray(direction, dtype=np.float64)
        e_bar = e_bar / np.linalg.norm(e_bar)
    e_perp = perpendicular_unit(e_bar)
    theta_pre = theta_ft + gap_norm * e_bar
    if sigma_pre is None:
        sigma_pre = np.eye(d)
    return LinearTaskSpec(
        d=d,
        theta_pre=theta_pre,
        theta_ft=theta_ft,
        e_bar=(theta_pre - theta_ft) / np.linalg.norm(theta_pre - theta_ft),
        e_perp=e_perp,
        rho=float(rho),
        sigma_pre=np.asarray(sigma_pre, dtype=np.float64),
    )


# --- temperature re-parameterisations ---------------------------------------


def _check_tau(tau):
    if not tau > 0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {tau}")


def _check_beta_rho(beta, rho):
    if not 0.0 < beta <= 1.0:
        raise OutOfRangeError(f"beta must lie in (0, 1], got {beta}")
    if not 0.0 <= rho < 1.0:
        raise OutOfRangeError(f"rho must lie in [0, 1), got {rho}")


def mu_from_tau(tau: float, gap_norm: float) -> float:
    _check_tau(tau)
    if not gap_norm > 0:
        raise OutOfRangeError(f"gap_norm must be > 0, got {gap_norm}")
    return math.sqrt(tau / (tau + 2.0 * gap_norm**2))


def beta_to_mu(beta: float, rho: float) -> float:
    _check_beta_rho(beta, rho)
    return math.sqrt(beta * (1 - rho**2) / ((1 + beta) * (1 - beta * rho**2)))


def beta_to_tau(beta: float, rho: float, gap_norm: float) -> float:
    _check_beta_rho(beta, rho)
    return 2 * beta * (1 - rho**2) * gap_norm**2 / (1 - beta**2 * rho**2)


# --- weighted covariance ----------------------------------------------------


def q_matrix(spec: LinearTaskSpec, mu: float) -> np.ndarray:
    e, p, rho = spec.e_bar, spec.e_perp, spec.rho
    cross = np.outer(e, p)
    return (
        (1 - mu**2) * np.outer(e, e)
        + rho**2 * (1 - mu**2) * np.outer(p, p)
        - rho * mu**2 * (cross + cross.T)
    )


def weighted_covariance_closed(spec: LinearTaskSpec, tau: float) -> np.ndarray:
    mu = mu_from_tau(tau, spec.gap_norm)
    return mu * (np.eye(spec.d) - q_matrix(spec, mu))


def _check_spd(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionMismatchError(f"covariance must be square, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise NotPositiveDefiniteError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance is not positive definite") from None


def weighted_covariance_general(sigma_tilde, e, tau: float) -> np.ndarray:
    """Weighted covariance for arbitrary SPD input covariance and gap ``e``."""
    _check_spd(sigma_tilde)
    _check_tau(tau)
    s = np.asarray(sigma_tilde, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (s.shape[0],):
        raise DimensionMismatchError("e does not match the covariance dimension")
    se = s @ e
    quad = float(e @ se)
    if quad == 0.0:
        raise OutOfRangeError("e must be non-zero")
    alpha = tau / quad
    mu = math.sqrt(alpha / (alpha + 2))
    return mu * (s - (1 - mu**2) * np.outer(se, se) / quad)


def _resolve_threads(threads):
    if threads is None:
        threads = int(os.environ.get("FLOWLAB_THREADS", "1") or 1)
    return max(1, int(threads))


def _mc_accumulate(draw, e, tau, n_samples, seed, threads):
    n_chunks = -(-n_samples // MC_CHUNK)

    def chunk(i):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        m = min(MC_CHUNK, n_samples - i * MC_CHUNK)
        x = draw(rng, m)
        w = np.exp(-((x @ e) ** 2) / tau)
        return (x * w[:, None]).T @ x

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(i) for i in range(n_chunks)]
    total = parts[0]
    for p in parts[1:]:  # fixed order keeps threaded runs bit-identical
        total = total + p
    return total / n_samples


def weighted_covariance_mc(sigma_tilde, e, tau: float, n_samples: int, seed: int, threads=None) -> np.ndarray:
    """Monte-Carlo estimate of ``E[exp(-<e, x>^2 / tau) x x^T]``, ``x ~ N(0, sigma_tilde)``.

    Samples come in chunks of ``MC_CHUNK`` drawn from per-chunk generators
    seeded by ``(seed, chunk_index)``; the result does not depend on
    ``threads``.
    """
    chol = _check_spd(sigma_tilde)
    _check_tau(tau)
    if n_samples < 1:
        raise OutOfRangeError("n_samples must be >= 1")
    e = np.asarray(e, dtype=np.float64)
    d = chol.shape[0]

    def draw(rng, m):
        return rng.standard_normal((m, d)) @ chol.T

    return _mc_accumulate(draw, e, tau, n_samples, seed, _resolve_threads(threads))


def _basis_draw(spec: LinearTaskSpec):
    basis = spec.basis()
    rho = spec.rho
    c = math.sqrt(1 - rho**2)

    def draw(rng, m):
        z = rng.standard_normal((m, spec.d))
        coef = z.copy()
        coef[:, 1] = rho * z[:, 0] + c * z[:, 1]
        return coef @ basis.T

    return draw


def basis_sampler(spec: LinearTaskSpec, n: int, seed: int) -> np.ndarray:
    """Draw fine-tuning inputs from independent normals in the ``(e_bar, e_perp, ...)`` basis."""
    if n < 1:
        raise OutOfRangeError("n must be >= 1")
    return _basis_draw(spec)(np.random.default_rng(seed), n)


def weighted_covariance_mc_basis(spec: LinearTaskSpec, tau: float, n_samples: int, seed: int, threads=None) -> np.ndarray:
    """Same estimate as :func:`weighted_covariance_mc`, using :func:`basis_sampler` draws."""
    _check_tau(tau)
    return _mc_accumulate(_basis_draw(spec), spec.e, tau, n_samples, seed, _resolve_threads(threads))


# --- spectrum of Q ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralPair:
    """Non-zero eigenpairs of Q; vectors are coordinates on ``(e_bar, e_perp)``."""

    lambda1: float
    lambda2: float
    v1: np.ndarray
    v2: np.ndarray
    beta: float
    mu: float
    rho: float

    def embed(self, spec: LinearTaskSpec) -> tuple[np.ndarray, np.ndarray]:
        b = np.column_stack([spec.e_bar, spec.e_perp])
        return b @ self.v1, b @ self.v2


def q_eigen(beta: float, rho: float) -> SpectralPair:
    mu = beta_to_mu(beta, rho)
    br = beta * rho
    s = math.sqrt(1 + br**2)
    return SpectralPair(
        lambda1=(1 + beta * rho**2) / (1 + beta),
        lambda2=rho**2 * (1 - beta) / (1 - beta * rho**2),
        v1=np.array([1.0, -br]) / s,
        v2=np.array([-br, -1.0]) / s,
        beta=beta,
        mu=mu,
        rho=rho,
    )


def q_reduced_matrix(beta: float, rho: float) -> np.ndarray:
    """Q restricted to ``span(e_bar, e_perp)``."""
    mu = beta_to_mu(beta, rho)
    return np.array(
        [
            [1 - mu**2, -rho * mu**2],
            [-rho * mu**2, rho**2 * (1 - mu**2)],
        ]
    )


def stalled_direction(spec: LinearTaskSpec, beta: float) -> np.ndarray:
    """Unit vector along ``e - beta rho |e| e_perp``, the slowest-converging direction."""
    _check_beta_rho(beta, spec.rho)
    v = spec.e - beta * spec.rho * spec.gap_norm * spec.e_perp
    return v / np.linalg.norm(v)


# --- trajectories -------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    method: str
    eta: float
    thetas: np.ndarray  # (K+1, d)
    err1: np.ndarray
    err2: np.ndarray
    err_tot: np.ndarray
    coef_e: np.ndarray
    coef_eperp: np.ndarray
    gamma: np.ndarray | None = None
    approx_thetas: np.ndarray | None = None
    beta: float | None = None
    tau: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.thetas) - 1

    def rows(self):
        """Rows matching ``k,method,coef_e,coef_eperp,err1,err2,err_tot,gamma``."""
        for k in range(len(self.thetas)):
            g = "" if self.gamma is None else repr(float(self.gamma[k]))
            yield [
                str(k),
                self.method,
                repr(float(self.coef_e[k])),
                repr(float(self.coef_eperp[k])),
                repr(float(self.err1[k])),
                repr(float(self.err2[k])),
                repr(float(self.err_tot[k])),
                g,
            ]


TRAJECTORY_HEADER = ["k", "method", "coef_e", "coef_eperp", "err1", "err2", "err_tot", "gamma"]


def population_errors(theta, spec: LinearTaskSpec) -> tuple[float, float, float]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.d,):
        raise DimensionMismatchError(f"theta must have shape ({spec.d},), got {theta.shape}")
    a = theta - spec.theta_pre
    b = theta - spec.theta_ft
    err1 = float(a @ spec.sigma_pre @ a)
    err2 = float(b @ spec.sigma_tilde @ b)
    return err1, err2, err1 + err2


def trajectory_from_thetas(spec, method, eta, thetas, **kw) -> Trajectory:
    """Wrap iterates with their population errors and plane coordinates."""
    errs = np.array([population_errors(t, spec) for t in thetas]).reshape(-1, 3)
    coords = np.array([spec.coords(t) for t in thetas]).reshape(-1, 2)
    return Trajectory(
        method=method,
        eta=eta,
        thetas=thetas,
        err1=errs[:, 0],
        err2=errs[:, 1],
        err_tot=errs[:, 0] + errs[:, 1],
        coef_e=coords[:, 0],
        coef_eperp=coords[:, 1],
        **kw,
    )


def _plane_thetas(spec, coef_e, coef_p):
    g = spec.gap_norm
    return spec.theta_ft + g * (np.outer(coef_e, spec.e_bar) + np.outer(coef_p, spec.e_perp))


def vanilla_ft_trajectory(spec: LinearTaskSpec, eta: float = 0.5, K: int = 50) -> Trajectory:
    """Closed-form GD on the unweighted fine-tuning error, started at ``theta_pre``.

    ``I - 2 eta sigma_tilde`` has eigenvalues ``1 - 2 eta (1 +/- rho)`` on
    ``(e_bar +/- e_perp) / sqrt(2)``; ``e`` lies in that plane.
    """
    if K < 0:
        raise OutOfRangeError("K must be >= 0")
    if not eta > 0:
        raise OutOfRangeError("eta must be > 0")
    k = np.arange(K + 1)
    rho = spec.rho
    if eta == 0.5:
        # exact form: rho^k on e for even k, -rho^k on e_perp for odd k
        pk = rho ** k.astype(float)
        even = k % 2 == 0
        coef_e = np.where(even, pk, 0.0)
        coef_p = np.where(even, 0.0, -pk)
    else:
        a = (1 - 2 * eta * (1 + rho)) ** k
        b = (1 - 2 * eta * (1 - rho)) ** k
        coef_e = (a + b) / 2
        coef_p = (a - b) / 2
    thetas = _plane_thetas(spec, coef_e, coef_p)
    return trajectory_from_thetas(spec, "vanilla", eta, thetas)


def flow_trajectory(spec: LinearTaskSpec, beta: float, K: int = 50, eta: float | None = None) -> Trajectory:
    """Closed-form GD on the weighted fine-tuning error, started at ``theta_pre``.

    ``beta`` sets the temperature through :func:`beta_to_tau`. The default
    step is ``1 / (2 mu)``, which turns the iteration matrix into Q itself.
    """
    if K < 0:
        raise OutOfRangeError("K must be >= 0")
    sp = q_eigen(beta, spec.rho)
    mu = sp.mu
    if eta is None:
        eta = 1.0 / (2.0 * mu)
    if not eta > 0:
        raise OutOfRangeError("eta must be > 0")
    c1 = 1 - 2 * eta * mu * (1 - sp.lambda1)
    c2 = 1 - 2 * eta * mu * (1 - sp.lambda2)
    if eta == 1.0 / (2.0 * mu):
        c1, c2 = sp.lambda1, sp.lambda2
    br2 = (beta * spec.rho) ** 2
    k = np.arange(K + 1).astype(float)
    p1 = c1**k
    p2 = c2**k
    coef_e = (p1 + p2 * br2) / (1 + br2)
    coef_p = -beta * spec.rho * (p1 - p2) / (1 + br2)
    gamma = sp.lambda1**k / (1 + br2)
    thetas = _plane_thetas(spec, coef_e, coef_p)
    approx = _plane_thetas(spec, gamma, -beta * spec.rho * gamma)
    tau = beta_to_tau(beta, spec.rho, spec.gap_norm)
    return trajectory_from_thetas(spec, "flow", eta, thetas, gamma=gamma, approx_thetas=approx, beta=beta, tau=tau)


def simulate_gd(sigma_eff, theta0, theta_opt, eta: float, K: int, spec: LinearTaskSpec | None = None, method="gd") -> Trajectory:
    """Iterate ``theta <- theta - 2 eta sigma_eff (theta - theta_opt)`` for K steps."""
    if not eta > 0:
        raise OutOfRangeError("eta must be > 0")
    if K < 0:
        raise OutOfRangeError("K must be >= 0")
    s = np.asarray(sigma_eff, dtype=np.float64)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    opt = np.asarray(theta_opt, dtype=np.float64)
    start = np.linalg.norm(theta - opt)
    thetas = [theta.copy()]
    for _ in range(K):
        theta = theta - eta * 2.0 * (s @ (theta - opt))
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta - opt) > 1e6 * max(start, 1e-300):
            raise DivergenceError("gradient descent diverged")
        thetas.append(theta.copy())
    thetas = np.array(thetas)
    if spec is not None:
        return trajectory_from_thetas(spec, method, eta, thetas)
    nan = np.full(len(thetas), np.nan)
    return Trajectory(method, eta, thetas, nan, nan.copy(), nan.copy(), nan.copy(), nan.copy())


# --- model averaging ----------------------------------------------------------


def model_average(spec: LinearTaskSpec, omega: float) -> np.ndarray:
    if not 0.0 <= omega <= 1.0:
        raise OutOfRangeError(f"omega must lie in [0, 1], got {omega}")
    return spec.theta_ft + omega * spec.e


def optimal_averaging(spec: LinearTaskSpec) -> tuple[float, float]:
    """Best mixing weight and its total error: ``s / (s + 1)`` and ``s / (s + 1) |e|^2``."""
    s = float(spec.e_bar @ spec.sigma_pre @ spec.e_bar)
    return s / (s + 1), s / (s + 1) * spec.gap_norm**2


def _plane_err_tot(spec, coef_e, coef_p):
    """Vectorised total error for points ``theta_ft + |e|(a e_bar + b e_perp)``."""
    S = spec.sigma_pre
    see = spec.e_bar @ S @ spec.e_bar
    sep = spec.e_bar @ S @ spec.e_perp
    spp = spec.e_perp @ S @ spec.e_perp
    a1 = coef_e - 1
    err1 = a1**2 * see + 2 * a1 * coef_p * sep + coef_p**2 * spp
    err2 = coef_e**2 + coef_p**2 + 2 * spec.rho * coef_e * coef_p
    return (err1 + err2) * spec.gap_norm**2


def _flow_err_tot(spec, beta, ks):
    sp = q_eigen(beta, spec.rho)
    br2 = (beta * spec.rho) ** 2
    p1 = sp.lambda1**ks
    p2 = sp.lambda2**ks
    return _plane_err_tot(spec, (p1 + p2 * br2) / (1 + br2), -beta * spec.rho * (p1 - p2) / (1 + br2))


@dataclass
class AveragingReport:
    flow_min: float
    beta: float
    K: int
    omega_star: float
    averaging_err: float
    gap_sq: float
    tol: float = 1e-6

    @property
    def flow_le_averaging(self) -> bool:
        return self.flow_min <= self.averaging_err + self.tol

    @property
    def beats_endpoints(self) -> bool:
        return self.flow_min < self.gap_sq

    @property
    def passed(self) -> bool:
        return self.flow_le_averaging and self.beats_endpoints


def flow_beats_averaging_check(spec: LinearTaskSpec, beta_grid, K_max: int) -> AveragingReport:
    """Sweep FLOW's total error over ``beta_grid x {0..K_max}``.

    For every K the best grid beta is polished by a bounded scalar search
    between its grid neighbours, since the closed form is cheap.
    """
    betas = np.unique(np.asarray(list(beta_grid), dtype=np.float64))
    if betas.size == 0 or K_max < 1:
        raise OutOfRangeError("need a non-empty beta grid and K_max >= 1")
    ks = np.arange(K_max + 1).astype(float)
    table = np.array([_flow_err_tot(spec, b, ks) for b in betas])  # (n_beta, K+1)
    j, k = np.unravel_index(table.argmin(), table.shape)
    best = (float(table[j, k]), float(betas[j]), int(k))
    for k in range(1, K_max + 1):
        j = int(table[:, k].argmin())
        lo = betas[max(j - 1, 0)]
        hi = betas[min(j + 1, len(betas) - 1)]
        if hi <= lo:
            continue
        res = minimize_scalar(
            lambda b: float(_flow_err_tot(spec, b, np.array([float(k)]))[0]),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if res.fun < best[0]:
            best = (float(res.fun), float(res.x), k)
    omega, err_star = optimal_averaging(spec)
    return AveragingReport(
        flow_min=best[0],
        beta=best[1],
        K=best[2],
        omega_star=omega,
        averaging_err=err_star,
        gap_sq=spec.gap_norm**2,
    )
