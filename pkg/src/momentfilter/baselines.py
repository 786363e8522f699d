"""Reference and comparison filters.

* kalman_ou: exact filter for the linear Gaussian benchmark (the OU SDE has
  a closed-form discretization, so the Kalman recursion is exact truth).
* gauss_hermite_filter: classical Gaussian assumed-density filter with
  tensorized Gauss-Hermite sigma points and a joint moment-matching update.
* bootstrap_pf: sequential Monte Carlo with Euler-Maruyama proposals and
  stratified resampling at every step.
* grid_reference_filter: dense-grid (d=1) filter used as brute-force truth;
  prediction is a trapezoid-weighted kernel product, the kernel being the
  same Gaussian transition approximation the moment filter uses (optionally
  finely substepped), so comparisons isolate quadrature error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from momentfilter.filtering import MeasurementModel
from momentfilter.transition import SdeModel, TransitionConfig, conditional_mean_cov

__all__ = [
    "GaussianBelief",
    "KalmanResult",
    "GaussianTrajectory",
    "ParticleTrajectory",
    "GridTrajectory",
    "ou_discretization",
    "kalman_ou",
    "gauss_hermite_filter",
    "stratified_resample",
    "bootstrap_pf",
    "build_grid_kernel",
    "grid_reference_filter",
]

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class KalmanResult:
    means: np.ndarray
    variances: np.ndarray
    predicted_means: np.ndarray
    predicted_variances: np.ndarray
    nll: float


@dataclass(frozen=True)
class GaussianTrajectory:
    means: np.ndarray
    covariances: np.ndarray
    nll: float
    diverged_at: int | None = None
    nll_increments: np.ndarray | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


@dataclass(frozen=True)
class ParticleTrajectory:
    means: np.ndarray
    nll: float
    diverged_at: int | None = None
    particles: np.ndarray | None = None  # (T, n, d) pre-resampling
    weights: np.ndarray | None = None  # (T, n) normalized, pre-resampling
    nll_increments: np.ndarray | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


@dataclass(frozen=True)
class GridTrajectory:
    grid: np.ndarray
    densities: np.ndarray  # (T, n) posterior density after each update
    nll: float
    nll_increments: np.ndarray | None = None

    @property
    def trapezoid_weights(self) -> np.ndarray:
        return _trapezoid_weights(self.grid)


# --------------------------------------------------------------------- Kalman


def ou_discretization(ell: float, sigma: float, dt: float) -> tuple[float, float]:
    """Exact one-step (F, Q) of dX = -X/ell dt + sqrt(2 sigma^2/ell) dW."""
    F = math.exp(-dt / ell)
    Q = sigma**2 * (1.0 - math.exp(-2.0 * dt / ell))
    return F, Q


def kalman_ou(
    ell: float,
    sigma: float,
    dt: float,
    ys,
    meas_noise_var: float = 1.0,
    init_mean: float = 0.0,
    init_var: float | None = None,
) -> KalmanResult:
    """Exact filter for dX = -X/ell dt + sqrt(2 sigma^2/ell) dW, Y = X + xi.

    Uses the closed-form discretization F = exp(-dt/ell),
    Q = sigma^2 (1 - exp(-2 dt/ell)); the default initial law is the
    stationary N(0, sigma^2).
    """
    if ell <= 0 or sigma <= 0:
        raise ValueError("ell and sigma must be > 0")
    if meas_noise_var <= 0:
        raise ValueError("meas_noise_var must be > 0")
    F, Q = ou_discretization(ell, sigma, dt)
    m = float(init_mean)
    P = sigma**2 if init_var is None else float(init_var)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    T = ys.shape[0]
    means = np.empty(T)
    variances = np.empty(T)
    pred_means = np.empty(T)
    pred_vars = np.empty(T)
    nll = 0.0
    for k in range(T):
        mp = F * m
        Pp = F * F * P + Q
        S = Pp + meas_noise_var
        resid = ys[k] - mp
        nll += 0.5 * (_LOG_2PI + math.log(S) + resid * resid / S)
        K = Pp / S
        m = mp + K * resid
        P = (1.0 - K) * Pp
        pred_means[k], pred_vars[k] = mp, Pp
        means[k], variances[k] = m, P
    return KalmanResult(means, variances, pred_means, pred_vars, nll)


# --------------------------------------------------- Gauss-Hermite Gaussian filter


def _gh_unit_points(d: int, gh_order: int):
    """Tensorized probabilists' Gauss-Hermite points/weights for N(0, I_d)."""
    z, w = hermegauss(gh_order)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * d), indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=1)
    weights = np.ones(points.shape[0])
    for wg in np.meshgrid(*([w] * d), indexing="ij"):
        weights = weights * wg.reshape(-1)
    return points, weights


def gauss_hermite_filter(
    model: SdeModel,
    meas: MeasurementModel,
    ys,
    times,
    init_mean,
    init_cov,
    gh_order: int = 11,
    transition: TransitionConfig | None = None,
    t0: float = 0.0,
) -> GaussianTrajectory:
    """Gaussian assumed-density filter with Gauss-Hermite sigma points.

    Prediction moment-matches the SDE transition (same conditional mean/cov
    approximation as the moment filter); the update moment-matches the joint
    (x, y) Gaussian through the measurement's conditional mean/cov, i.e.
    statistical linearization.  Requires meas.mean_fn and meas.cov_fn.
    """
    if meas.mean_fn is None or meas.cov_fn is None:
        raise ValueError("gauss_hermite_filter needs meas.mean_fn and meas.cov_fn")
    if gh_order < 1:
        raise ValueError("gh_order must be >= 1")
    transition = transition or TransitionConfig()
    d = model.d
    z, w = _gh_unit_points(d, gh_order)
    m = np.atleast_1d(np.asarray(init_mean, dtype=float)).copy()
    P = np.atleast_2d(np.asarray(init_cov, dtype=float)).copy()
    times = np.asarray(times, dtype=float)
    T = times.shape[0]
    means = np.full((T, d), np.nan)
    covs = np.full((T, d, d), np.nan)
    incs = np.full(T, np.nan)
    nll = 0.0
    diverged_at = None
    prev_t = t0
    for k in range(T):
        dt = float(times[k] - prev_t)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            diverged_at = k + 1
            break
        pts = m[None, :] + z @ L.T
        mu, Sig = conditional_mean_cov(model, pts, dt, transition)
        mp = w @ mu
        dev = mu - mp[None, :]
        Pp = np.einsum("q,qi,qj->ij", w, dev, dev) + np.einsum("q,qij->ij", w, Sig)
        Pp = 0.5 * (Pp + Pp.T)
        try:
            Lp = np.linalg.cholesky(Pp)
        except np.linalg.LinAlgError:
            diverged_at = k + 1
            break
        pts = mp[None, :] + z @ Lp.T
        h = np.atleast_2d(np.asarray(meas.mean_fn(pts), dtype=float))
        if h.shape[0] != pts.shape[0]:
            h = h.T
        R = np.asarray(meas.cov_fn(pts), dtype=float)
        if R.ndim == 1:
            R = R[:, None, None]
        my = w @ h
        dy_ = h - my[None, :]
        S = np.einsum("q,qi,qj->ij", w, dy_, dy_) + np.einsum("q,qij->ij", w, R)
        S = 0.5 * (S + S.T)
        C = np.einsum("q,qi,qj->ij", w, pts - mp[None, :], dy_)
        try:
            S_chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            diverged_at = k + 1
            break
        y_vec = np.atleast_1d(np.asarray(ys[k], dtype=float))
        resid = y_vec - my
        alpha = np.linalg.solve(S, resid)
        K = np.linalg.solve(S, C.T).T
        m = mp + K @ resid
        P = Pp - K @ S @ K.T
        P = 0.5 * (P + P.T)
        incs[k] = 0.5 * (
            len(y_vec) * _LOG_2PI
            + 2.0 * float(np.log(np.diag(S_chol)).sum())
            + float(resid @ alpha)
        )
        nll += incs[k]
        means[k] = m
        covs[k] = P
        prev_t = times[k]
    return GaussianTrajectory(means, covs, nll, diverged_at, incs)


# ------------------------------------------------------------- particle filter


def stratified_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniform per stratum ((i + U_i)/n), inverted through the weight CDF."""
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0]
    u = (np.arange(n) + rng.uniform(size=n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # guard the final edge against rounding
    return np.minimum(np.searchsorted(cdf, u, side="left"), n - 1)


def _em_propagate(
    model: SdeModel, x: np.ndarray, dt: float, substeps: int, rng: np.random.Generator
) -> np.ndarray:
    h = dt / substeps
    sqrt_h = math.sqrt(h)
    for _ in range(substeps):
        a = np.asarray(model.drift(x), dtype=float)
        b = np.asarray(model.dispersion(x), dtype=float)
        noise = rng.standard_normal((x.shape[0], model.dw))
        x = x + a * h + np.einsum("nij,nj->ni", b, noise) * sqrt_h
    return x


def bootstrap_pf(
    model: SdeModel,
    meas: MeasurementModel,
    ys,
    times,
    n_particles: int,
    rng: np.random.Generator,
    init_sampler,
    t0: float = 0.0,
    substeps: int = 1,
    store_particles: bool = False,
) -> ParticleTrajectory:
    """Bootstrap particle filter: EM proposals, stratified resampling each step.

    The NLL is the standard unbiased-likelihood estimator: per step,
    -(logsumexp(log w) - log n) over the unnormalized log-weights.  Filtering
    means (and the optionally stored particles) are taken before resampling,
    weighted.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    x = np.atleast_2d(np.asarray(init_sampler(rng, n_particles), dtype=float))
    times = np.asarray(times, dtype=float)
    T = times.shape[0]
    d = model.d
    means = np.full((T, d), np.nan)
    parts = np.empty((T, n_particles, d)) if store_particles else None
    wgts = np.empty((T, n_particles)) if store_particles else None
    incs = np.full(T, np.nan)
    nll = 0.0
    diverged_at = None
    log_n = math.log(n_particles)
    prev_t = t0
    for k in range(T):
        dt = float(times[k] - prev_t)
        x = _em_propagate(model, x, dt, substeps, rng)
        logw = np.asarray(meas.log_density(ys[k], x), dtype=float)
        lse = float(logsumexp(logw))
        if not np.isfinite(lse):
            diverged_at = k + 1
            break
        incs[k] = -(lse - log_n)
        nll += incs[k]
        w = np.exp(logw - lse)
        means[k] = w @ x
        if store_particles:
            parts[k] = x
            wgts[k] = w
        ancestors = stratified_resample(w, rng)
        x = x[ancestors]
        prev_t = times[k]
    return ParticleTrajectory(means, nll, diverged_at, parts, wgts, incs)


# ------------------------------------------------------------------ grid filter


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    dx = grid[1] - grid[0]
    w = np.full(grid.shape[0], dx)
    w[0] = w[-1] = dx / 2.0
    return w


def build_grid_kernel(
    model: SdeModel,
    dt: float,
    grid: np.ndarray,
    transition: TransitionConfig | None = None,
) -> np.ndarray:
    """K[i, j] = approximate transition density from grid_j to grid_i.

    The per-point conditional mean/variance come from the same TME/EM
    machinery as the moment filter, wrapped in a Gaussian kernel.
    """
    transition = transition or TransitionConfig()
    nodes = grid[:, None]
    mu, var = conditional_mean_cov(model, nodes, dt, transition)
    mu = mu[:, 0]
    v = np.maximum(var[:, 0, 0], 1e-300)
    diff = grid[:, None] - mu[None, :]
    return np.exp(-0.5 * diff**2 / v[None, :]) / np.sqrt(2.0 * math.pi * v[None, :])


def grid_reference_filter(
    model: SdeModel,
    meas: MeasurementModel,
    ys,
    times,
    init_pdf,
    lo: float = -8.0,
    hi: float = 8.0,
    n: int = 2000,
    transition: TransitionConfig | None = None,
    t0: float = 0.0,
    substeps: int = 1,
    kernel: np.ndarray | None = None,
) -> GridTrajectory:
    """Dense-grid Bayes recursion for d=1 models (brute-force reference).

    Prediction multiplies by the transition kernel with trapezoid weights
    (`substeps` kernel applications of dt/substeps each); the update is a
    pointwise likelihood product followed by renormalization.  Mass leaking
    off the grid beyond 1e-6 logs a diagnostic warning.  A precomputed
    `kernel` (from build_grid_kernel, for dt/substeps) may be supplied to
    amortize setup across Monte Carlo runs.
    """
    if model.d != 1:
        raise ValueError("grid_reference_filter requires a one-dimensional model")
    times = np.asarray(times, dtype=float)
    T = times.shape[0]
    dts = np.diff(np.concatenate([[t0], times]))
    if T and not np.allclose(dts, dts[0], rtol=1e-12, atol=1e-15):
        raise ValueError("grid_reference_filter needs an even time grid")
    grid = np.linspace(lo, hi, n)
    tw = _trapezoid_weights(grid)
    if kernel is None and T:
        kernel = build_grid_kernel(model, float(dts[0]) / substeps, grid, transition)
    p = np.asarray(init_pdf(grid), dtype=float)
    p = p / (tw @ p)
    densities = np.empty((T, n))
    incs = np.empty(T)
    nll = 0.0
    for k in range(T):
        for _ in range(substeps):
            p = kernel @ (tw * p)
        mass = tw @ p
        if abs(1.0 - mass) > 1e-6:
            logger.warning(
                "grid filter: %.3e mass left the grid at step %d", abs(1.0 - mass), k + 1
            )
        p = p / mass
        ll = np.asarray(meas.log_density(ys[k], grid[:, None]), dtype=float)
        shift = ll.max()
        lik = np.exp(ll - shift)
        h_shifted = tw @ (p * lik)
        incs[k] = -(shift + math.log(h_shifted))
        nll += incs[k]
        p = p * lik / h_shifted
        densities[k] = p
    return GridTrajectory(grid, densities, nll, incs)
