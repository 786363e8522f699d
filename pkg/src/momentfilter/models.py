"""Benchmark systems and characteristic-function error metrics.

Four models exercised throughout the test harness:

* ou                -- linear SDE with Gaussian measurements (exact Kalman
                       truth available; ell=1, sigma=0.5 defaults)
* benes_bernoulli   -- tanh drift with binary measurements and a bimodal
                       initial law; filtering distribution is multimodal
* well_poisson      -- double-well drift x(1 - theta1 x^2) with Poisson
                       counts of rate softplus(theta2 x); the parameter-
                       estimation testbed (truth theta = (3, 3))
* prey_predator     -- 2-d Lotka-Volterra SDE with multiplicative noise and
                       Poisson measurements of a logistic rate in the prey

Each model bundles the SDE, the measurement law, callable initial moments
(to any order), an initial-law sampler for particle methods, and a default
measurement grid.  Characteristic functions can be formed from moment sets,
from weighted samples, and from grid densities; the error metric is the sup
over a symmetric z-window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import sympy
from scipy.special import expit, gammaln

from momentfilter.errors import NonFiniteError
from momentfilter.filtering import MeasurementModel
from momentfilter.momentspace import MomentSet, count_indices
from momentfilter.transition import (
    SdeModel,
    gaussian_moments,
    state_symbols,
)

__all__ = [
    "BenchmarkModel",
    "make_ou",
    "make_benes_bernoulli",
    "make_well_poisson",
    "make_prey_predator",
    "make_model",
    "MODEL_BUILDERS",
    "simulate",
    "char_fn_from_moments",
    "char_fn_from_samples",
    "char_fn_from_grid",
    "char_fn_gaussian",
    "char_fn_window",
    "sup_char_error",
]


@dataclass(frozen=True)
class BenchmarkModel:
    """A ready-to-run filtering problem.

    ``init_moments(order)`` returns the initial MomentSet with every moment
    of degree <= 2*order - 1; ``init_sampler(rng, n)`` draws (n, d) initial
    states; ``init_mean``/``init_cov`` summarize the initial law for
    Gaussian baselines.  ``default_times(steps)`` builds the measurement
    grid the model was studied on.
    """

    name: str
    sde: SdeModel
    meas: MeasurementModel
    init_moments: object
    init_sampler: object
    init_mean: np.ndarray
    init_cov: np.ndarray
    init_pdf: object | None
    dt: float
    params: dict

    def default_times(self, steps: int) -> np.ndarray:
        return self.dt * np.arange(1, steps + 1)


# ------------------------------------------------------------- measurement laws


def gaussian_measurement(noise_var: float = 1.0) -> MeasurementModel:
    """y = x_1 + noise; the linear Gaussian benchmark measurement."""
    if noise_var <= 0:
        raise ValueError("noise_var must be > 0")
    log_norm = -0.5 * math.log(2.0 * math.pi * noise_var)

    def log_density(y, nodes):
        return log_norm - 0.5 * (float(y) - nodes[:, 0]) ** 2 / noise_var

    def simulate_fn(rng, states):
        return states[:, 0] + math.sqrt(noise_var) * rng.standard_normal(states.shape[0])

    return MeasurementModel(
        log_density=log_density,
        simulate=simulate_fn,
        mean_fn=lambda x: x[:, :1],
        cov_fn=lambda x: np.full((x.shape[0], 1, 1), noise_var),
    )


def bernoulli_cubic_measurement(slope: float = 0.2) -> MeasurementModel:
    """Binary y with success probability logistic(slope * x^3)."""

    def log_density(y, nodes):
        u = slope * nodes[:, 0] ** 3
        # log p = -log(1 + e^-u); log(1-p) = -log(1 + e^u)
        return -np.logaddexp(0.0, -u if float(y) >= 0.5 else u)

    def simulate_fn(rng, states):
        p = expit(slope * states[:, 0] ** 3)
        return (rng.random(states.shape[0]) < p).astype(float)

    def mean_fn(x):
        return expit(slope * x[:, 0] ** 3)[:, None]

    def cov_fn(x):
        p = expit(slope * x[:, 0] ** 3)
        return (p * (1.0 - p))[:, None, None]

    return MeasurementModel(
        log_density=log_density, simulate=simulate_fn, mean_fn=mean_fn, cov_fn=cov_fn
    )


def poisson_measurement(rate_fn, rate_floor: float = 1e-12) -> MeasurementModel:
    """Counts y with conditional rate rate_fn(nodes) -> (n,), floored."""

    def log_density(y, nodes):
        lam = np.maximum(rate_fn(nodes), rate_floor)
        yv = float(y)
        return yv * np.log(lam) - lam - gammaln(yv + 1.0)

    def simulate_fn(rng, states):
        return rng.poisson(np.maximum(rate_fn(states), rate_floor)).astype(float)

    def mean_fn(x):
        return np.maximum(rate_fn(x), rate_floor)[:, None]

    def cov_fn(x):
        return np.maximum(rate_fn(x), rate_floor)[:, None, None]

    return MeasurementModel(
        log_density=log_density, simulate=simulate_fn, mean_fn=mean_fn, cov_fn=cov_fn
    )


# ----------------------------------------------------------------- initial laws


def _gaussian_init(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    scale = np.sqrt(np.diag(cov))
    # moments of the standardized variable (X - mean) / scale; building them
    # directly (rather than restandardizing raw moments) stays exact at high
    # order even when scale is tiny relative to mean
    corr = cov / np.outer(scale, scale)

    def init_moments(order: int) -> MomentSet:
        return MomentSet(
            d, order, gaussian_moments(np.zeros(d), corr, 2 * order - 1),
            mean, scale,
        )

    def init_sampler(rng, n: int) -> np.ndarray:
        return mean[None, :] + rng.standard_normal((n, d)) @ chol.T

    return init_moments, init_sampler


def _symmetric_mixture_init(offset: float = 0.5, var: float = 0.05):
    """Equal mixture of N(-offset, var) and N(+offset, var), d=1."""

    def init_moments(order: int) -> MomentSet:
        vals = 0.5 * (
            gaussian_moments(-offset, var, 2 * order - 1)
            + gaussian_moments(offset, var, 2 * order - 1)
        )
        return MomentSet.from_values(1, order, vals).restandardized()

    def init_sampler(rng, n: int) -> np.ndarray:
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return (sign * offset + math.sqrt(var) * rng.standard_normal(n))[:, None]

    def init_pdf(x: np.ndarray) -> np.ndarray:
        c = 1.0 / math.sqrt(2.0 * math.pi * var)
        return 0.5 * c * (
            np.exp(-0.5 * (x + offset) ** 2 / var)
            + np.exp(-0.5 * (x - offset) ** 2 / var)
        )

    mean = np.zeros(1)
    cov = np.array([[var + offset**2]])
    return init_moments, init_sampler, init_pdf, mean, cov


# ---------------------------------------------------------------------- models


def make_ou(ell: float = 1.0, sigma: float = 0.5, noise_var: float = 1.0) -> BenchmarkModel:
    """Linear SDE dX = -X/ell dt + sqrt(2 sigma^2/ell) dW, y = x + noise.

    Initial law is the stationary N(0, sigma^2); measurements arrive every
    dt = 0.1 by default.
    """
    (x1,) = state_symbols(1)
    b = math.sqrt(2.0 * sigma**2 / ell)
    sde = SdeModel(
        d=1,
        dw=1,
        drift=lambda x: -x / ell,
        dispersion=lambda x: np.full(x.shape[:1] + (1, 1), b),
        drift_sym=(-x1 / ell,),
        dispersion_sym=((sympy.Float(b),),),
        name="ou",
    )
    init_moments, init_sampler = _gaussian_init(0.0, sigma**2)

    def init_pdf(x):
        return np.exp(-0.5 * x**2 / sigma**2) / math.sqrt(2.0 * math.pi * sigma**2)

    return BenchmarkModel(
        name="ou",
        sde=sde,
        meas=gaussian_measurement(noise_var),
        init_moments=init_moments,
        init_sampler=init_sampler,
        init_mean=np.zeros(1),
        init_cov=np.array([[sigma**2]]),
        init_pdf=init_pdf,
        dt=0.1,
        params={"ell": ell, "sigma": sigma, "noise_var": noise_var},
    )


def make_benes_bernoulli() -> BenchmarkModel:
    """tanh drift, unit dispersion, bimodal init, Bernoulli(logistic(x^3/5))."""
    (x1,) = state_symbols(1)
    sde = SdeModel(
        d=1,
        dw=1,
        drift=lambda x: np.tanh(x),
        dispersion=lambda x: np.ones(x.shape[:1] + (1, 1)),
        drift_sym=(sympy.tanh(x1),),
        dispersion_sym=((sympy.Integer(1),),),
        name="benes_bernoulli",
    )
    init_moments, init_sampler, init_pdf, mean, cov = _symmetric_mixture_init()
    return BenchmarkModel(
        name="benes_bernoulli",
        sde=sde,
        meas=bernoulli_cubic_measurement(slope=0.2),
        init_moments=init_moments,
        init_sampler=init_sampler,
        init_mean=mean,
        init_cov=cov,
        init_pdf=init_pdf,
        dt=0.01,
        params={},
    )


def make_well_poisson(theta1: float = 3.0, theta2: float = 3.0) -> BenchmarkModel:
    """Double-well drift x(1 - theta1 x^2), Poisson rate softplus(theta2 x).

    theta1 and theta2 stay symbolic in the SDE expressions (their values in
    param_values) so compiled transition derivatives are shared across
    parameter values during estimation.
    """
    if theta1 <= 0 or theta2 <= 0:
        raise ValueError("theta1 and theta2 must be > 0")
    (x1,) = state_symbols(1)
    th1 = sympy.Symbol("theta1", positive=True)
    sde = SdeModel(
        d=1,
        dw=1,
        drift=lambda x: x * (1.0 - theta1 * x**2),
        dispersion=lambda x: np.ones(x.shape[:1] + (1, 1)),
        drift_sym=(x1 * (1 - th1 * x1**2),),
        dispersion_sym=((sympy.Integer(1),),),
        param_symbols=(th1,),
        param_values=(theta1,),
        name="well_poisson",
    )

    def rate(nodes):
        return np.logaddexp(0.0, theta2 * nodes[:, 0])  # softplus

    init_moments, init_sampler, init_pdf, mean, cov = _symmetric_mixture_init()
    return BenchmarkModel(
        name="well_poisson",
        sde=sde,
        meas=poisson_measurement(rate),
        init_moments=init_moments,
        init_sampler=init_sampler,
        init_mean=mean,
        init_cov=cov,
        init_pdf=init_pdf,
        dt=0.01,
        params={"theta1": theta1, "theta2": theta2},
    )


def make_prey_predator(
    alpha: float = 4.0,
    beta: float = 4.0,
    zeta: float = 4.0,
    gamma: float = 4.0,
    sigma: float = 0.1,
) -> BenchmarkModel:
    """2-d Lotka-Volterra SDE with multiplicative noise and Poisson counts.

    dX1 = X1 (alpha - beta X2) dt + sigma X1 dW1
    dX2 = X2 (zeta X1 - gamma) dt + sigma X2 dW2
    y ~ Poisson(logistic(x1^3 - 1)); init N((1,1), 1e-3 I).
    """
    x1, x2 = state_symbols(2)

    def drift(x):
        return np.stack(
            [x[:, 0] * (alpha - beta * x[:, 1]), x[:, 1] * (zeta * x[:, 0] - gamma)],
            axis=1,
        )

    def dispersion(x):
        out = np.zeros(x.shape[:1] + (2, 2))
        out[:, 0, 0] = sigma * x[:, 0]
        out[:, 1, 1] = sigma * x[:, 1]
        return out

    sde = SdeModel(
        d=2,
        dw=2,
        drift=drift,
        dispersion=dispersion,
        drift_sym=(x1 * (alpha - beta * x2), x2 * (zeta * x1 - gamma)),
        dispersion_sym=((sigma * x1, sympy.Integer(0)), (sympy.Integer(0), sigma * x2)),
        name="prey_predator",
    )

    def rate(nodes):
        return expit(nodes[:, 0] ** 3 - 1.0)

    init_moments, init_sampler = _gaussian_init([1.0, 1.0], 1e-3 * np.eye(2))
    return BenchmarkModel(
        name="prey_predator",
        sde=sde,
        meas=poisson_measurement(rate),
        init_moments=init_moments,
        init_sampler=init_sampler,
        init_mean=np.ones(2),
        init_cov=1e-3 * np.eye(2),
        init_pdf=None,
        dt=0.001,
        params={"alpha": alpha, "beta": beta, "zeta": zeta, "gamma": gamma, "sigma": sigma},
    )


MODEL_BUILDERS = {
    "ou": make_ou,
    "benes_bernoulli": make_benes_bernoulli,
    "well_poisson": make_well_poisson,
    "prey_predator": make_prey_predator,
}


def make_model(name: str, **params) -> BenchmarkModel:
    if name not in MODEL_BUILDERS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_BUILDERS)}")
    return MODEL_BUILDERS[name](**params)


# ------------------------------------------------------------------ simulation


def simulate(model: BenchmarkModel, times, rng: np.random.Generator, substeps: int = 10):
    """Draw one latent path and its measurements.

    Euler-Maruyama with `substeps` internal steps per measurement interval,
    states recorded at the measurement times, measurements drawn from the
    model's conditional law.  Returns (states (T, d), ys (T,)).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if model.meas.simulate is None:
        raise ValueError("model measurement law has no simulator")
    times = np.asarray(times, dtype=float)
    sde = model.sde
    x = model.init_sampler(rng, 1)
    states = np.empty((times.shape[0], sde.d))
    ys = np.empty(times.shape[0])
    prev_t = 0.0
    for k, t in enumerate(times):
        h = (float(t) - prev_t) / substeps
        sqrt_h = math.sqrt(h)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(substeps):
                a = np.asarray(sde.drift(x), dtype=float)
                b = np.asarray(sde.dispersion(x), dtype=float)
                noise = rng.standard_normal((1, sde.dw))
                x = x + a * h + np.einsum("nij,nj->ni", b, noise) * sqrt_h
        if not np.isfinite(x).all():
            raise NonFiniteError(
                "simulated state blew up", context={"step": k + 1, "time": float(t)}
            )
        states[k] = x[0]
        ys[k] = model.meas.simulate(rng, x)[0]
        prev_t = float(t)
    return states, ys


# --------------------------------------------------------- characteristic fns


def char_fn_window(gamma: float = 2.0, n: int = 41) -> np.ndarray:
    """The z-grid of the sup-error metric: n equispaced points on [-g, g]."""
    return np.linspace(-gamma, gamma, n)


def char_fn_from_moments(M: MomentSet, z) -> np.ndarray:
    """Truncated series E[exp(izX)] = e^{izc} sum_n (i s z)^n u_n / n! (d=1).

    Uses the moment set's standardized values directly, so the series runs
    over O(1) numbers; reliable for |z| within the metric window.
    """
    if M.d != 1:
        raise ValueError("char_fn_from_moments requires d = 1")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n_terms = M.max_degree + 1
    isz = 1j * M.scale[0] * z
    powers = isz[:, None] ** np.arange(n_terms)[None, :]
    factorials = np.array([math.factorial(n) for n in range(n_terms)])
    series = powers @ (M.values[:n_terms] / factorials)
    return np.exp(1j * M.center[0] * z) * series


def char_fn_from_samples(x: np.ndarray, z, weights: np.ndarray | None = None) -> np.ndarray:
    """Empirical E[exp(izX)] over samples (optionally weighted)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    phase = np.exp(1j * z[:, None] * x[None, :])
    if weights is None:
        return phase.mean(axis=1)
    weights = np.asarray(weights, dtype=float)
    return phase @ (weights / weights.sum())


def char_fn_from_grid(grid: np.ndarray, density: np.ndarray, z) -> np.ndarray:
    """Trapezoidal Fourier sum of a grid density."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    dx = grid[1] - grid[0]
    tw = np.full(grid.shape[0], dx)
    tw[0] = tw[-1] = dx / 2.0
    return np.exp(1j * z[:, None] * grid[None, :]) @ (tw * density)


def char_fn_gaussian(mean: float, var: float, z) -> np.ndarray:
    """exp(iz mu - z^2 var / 2): the Gaussian-filter characteristic function."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return np.exp(1j * z * mean - 0.5 * z**2 * var)


def sup_char_error(phi_a: np.ndarray, phi_b: np.ndarray) -> float:
    return float(np.abs(np.asarray(phi_a) - np.asarray(phi_b)).max())


def count_moments(d: int, order: int) -> int:
    """Number of moments a filter of the given order carries."""
    return count_indices(d, 2 * order - 1)
