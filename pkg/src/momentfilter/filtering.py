"""The recursive moment filter.

Each step propagates a moment set through the SDE transition (prediction) and
reweights it against the incoming measurement by a discrete change of measure
(update), using the moment-generated quadrature rule of the current set in
both places.  With rules (w, lambda) built from the previous posterior
moments,

    predicted  m_n = sum_q w_q E[X_k^n | X_{k-1} = lambda_q]
    normalizer h   = sum_q w_q p(y | lambda_q)
    updated    m_n = sum_q w_q lambda_q^n p(y | lambda_q) / h

and the run's negative log-likelihood is -sum_k log h_k.  Likelihoods are
evaluated in the log domain with a shared max-log shift, so Poisson/Bernoulli
densities at extreme nodes underflow gracefully.  Moments are re-standardized
around their current mean and per-coordinate standard deviation after every
predict and update, which keeps the Gram matrices as well-conditioned as the
law allows.

Every numerical failure (Gram not positive definite, non-finite values,
nonpositive normalizer -- possible because quadrature weights may be
negative) surfaces as a recorded divergence on the trajectory, never as a
NaN in the outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from momentfilter.errors import (
    NonFiniteError,
    NonPositiveNormalizerError,
    NumericalDivergence,
)
from momentfilter.momentspace import MomentSet, graded_lex_indices
from momentfilter.quadrature import QuadratureRule, moment_quadrature
from momentfilter.transition import SdeModel, TransitionConfig, conditional_moments

__all__ = [
    "MeasurementModel",
    "FilterConfig",
    "FilterStep",
    "FilterTrajectory",
    "predict_moments",
    "update_moments",
    "run_moment_filter",
    "nll_objective",
    "NLL_SENTINEL",
]

NLL_SENTINEL = float(np.finfo(float).max)


@dataclass(frozen=True)
class MeasurementModel:
    """Conditional measurement law p(y | x).

    ``log_density(y, nodes)`` is vectorized over nodes (n, d) -> (n,) and is
    the only field the moment filter itself needs; -inf entries (zero
    density) are legal.  ``simulate(rng, states)`` draws y values row-wise
    for data generation.  ``mean_fn``/``cov_fn`` give E[y|x] and Cov[y|x]
    row-wise ((n, d) -> (n, dy) and (n, dy, dy)) for Gaussian
    moment-matching filters; the moment filter never calls them.
    """

    log_density: object
    simulate: object | None = None
    mean_fn: object | None = None
    cov_fn: object | None = None
    dy: int = 1


@dataclass(frozen=True)
class FilterConfig:
    """Knobs shared by every step of a filter run.

    repair "none" fails fast on a non-positive-definite Gram (each failure
    becomes a recorded divergence); "clip" retries the factorization once
    with diagonal pivots clipped to `clip_epsilon`.
    """

    transition: TransitionConfig = field(default_factory=TransitionConfig)
    repair: str = "none"
    clip_epsilon: float = 1e-10
    weight_threshold: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        if self.repair not in ("none", "clip"):
            raise ValueError(f"repair must be 'none' or 'clip', got {self.repair!r}")


@dataclass(frozen=True)
class FilterStep:
    k: int
    predicted: MomentSet | None
    updated: MomentSet | None
    log_likelihood_increment: float
    diverged: bool = False
    reason: str | None = None

    @property
    def likelihood_increment(self) -> float:
        return math.exp(self.log_likelihood_increment)


@dataclass(frozen=True)
class FilterTrajectory:
    steps: tuple
    nll: float
    diverged_at: int | None
    times: np.ndarray

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def means(self) -> np.ndarray:
        """(T, d) filtering means; NaN rows at/after a divergence."""
        return self._extract(lambda s: s.updated.mean())

    def variances(self) -> np.ndarray:
        return self._extract(lambda s: s.updated.variance())

    def _extract(self, fn) -> np.ndarray:
        rows = []
        d = None
        for s in self.steps:
            if s.updated is not None:
                row = fn(s)
                d = row.shape[0]
                rows.append(row)
            else:
                rows.append(None)
        d = 1 if d is None else d
        out = np.full((len(self.steps), d), np.nan)
        for i, row in enumerate(rows):
            if row is not None:
                out[i] = row
        return out

    def nll_increments(self) -> np.ndarray:
        return np.array(
            [np.nan if s.diverged else -s.log_likelihood_increment for s in self.steps]
        )


def _quadrature(M: MomentSet, config: FilterConfig) -> QuadratureRule:
    return moment_quadrature(
        M,
        repair=config.repair,
        clip_epsilon=config.clip_epsilon,
        weight_threshold=config.weight_threshold,
    )


def _monomials(points: np.ndarray, d: int, max_degree: int) -> np.ndarray:
    """(n, n_indices) values of every monomial of degree <= max_degree."""
    indices = np.array(graded_lex_indices(d, max_degree))
    powers = points[:, :, None] ** np.arange(max_degree + 1)[None, None, :]
    out = powers[:, 0, indices[:, 0]]
    for i in range(1, d):
        out = out * powers[:, i, indices[:, i]]
    return out


def predict_moments(
    prev: MomentSet, model: SdeModel, dt: float, config: FilterConfig
) -> MomentSet:
    """Chapman-Kolmogorov propagation of a moment set through one SDE step.

    Builds the quadrature rule of `prev`, pushes each node through the
    conditional moments of the transition, and mixes with the rule weights.
    The conditional moments are taken in the standardized frame of `prev`
    (one step changes that frame only mildly), so nothing is ever aggregated
    at raw scale; the result is then re-standardized around its new mean/std.
    """
    rule = _quadrature(prev, config)
    cond = conditional_moments(
        model, rule.nodes, dt, 2 * prev.order - 1, config.transition,
        center=prev.center, scale=prev.scale,
    )
    values = rule.weights @ cond
    if not np.isfinite(values).all():
        raise NonFiniteError(
            "non-finite predicted moments", context={"dt": dt}
        )
    predicted = MomentSet(prev.d, prev.order, values, prev.center, prev.scale)
    return predicted.restandardized()


def _update(pred: MomentSet, y, meas: MeasurementModel, config: FilterConfig):
    """Shared update path: returns (posterior MomentSet, log h)."""
    rule = _quadrature(pred, config)
    ll = np.asarray(meas.log_density(y, rule.nodes), dtype=float)
    if np.isnan(ll).any() or np.isposinf(ll).any():
        raise NonFiniteError("non-finite measurement log-density at a node")
    shift = ll.max()
    if not np.isfinite(shift):  # every node has zero density
        raise NonPositiveNormalizerError(
            "nonpositive normalizer", context={"max_log_density": float(shift)}
        )
    q = np.exp(ll - shift)
    normalizer = float(rule.weights @ q)
    if not normalizer > 0.0:
        raise NonPositiveNormalizerError(
            "nonpositive normalizer", context={"shifted_normalizer": normalizer}
        )
    log_h = shift + math.log(normalizer)
    # posterior moments in the standardized frame of `pred`: reweight the
    # standardized nodes, keeping the frame, then re-standardize.
    std_nodes = (rule.nodes - pred.center[None, :]) / pred.scale[None, :]
    V = _monomials(std_nodes, pred.d, 2 * pred.order - 1)
    values = (rule.weights * q) @ V / normalizer
    if not np.isfinite(values).all():
        raise NonFiniteError("non-finite updated moments")
    posterior = MomentSet(pred.d, pred.order, values, pred.center, pred.scale)
    return posterior.restandardized(), log_h


def update_moments(pred: MomentSet, y, meas: MeasurementModel, config: FilterConfig):
    """Change-of-measure update against one measurement.

    Returns (posterior MomentSet, h) with h = sum_q w_q p(y | lambda_q), the
    one-step-ahead predictive density of y.
    """
    posterior, log_h = _update(pred, y, meas, config)
    return posterior, math.exp(log_h)


def run_moment_filter(
    model: SdeModel,
    meas: MeasurementModel,
    ys,
    times,
    M0: MomentSet,
    config: FilterConfig | None = None,
) -> FilterTrajectory:
    """Alternate predict/update over a measurement sequence.

    `times` are the strictly increasing measurement times; the first step
    integrates the SDE from config.t0.  On any numerical failure the run
    halts with the divergence recorded on the trajectory -- prior steps stay
    intact and no NaN propagates into them.
    """
    config = config or FilterConfig()
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise ValueError("times must be one-dimensional")
    if len(ys) != times.shape[0]:
        raise ValueError("ys and times lengths differ")
    if times.shape[0] and not (np.diff(times) > 0).all():
        raise ValueError("times must be strictly increasing")
    if times.shape[0] and not times[0] > config.t0:
        raise ValueError("times must start after t0")

    current = M0.restandardized()
    steps = []
    nll = 0.0
    diverged_at = None
    prev_t = config.t0
    for k, (t, y) in enumerate(zip(times, ys), start=1):
        dt = float(t - prev_t)
        pred = None
        try:
            # overflow in intermediate arithmetic is an expected way for a
            # step to fail (e.g. optimizer probes of absurd parameters); the
            # non-finite values are caught structurally below, so the IEEE
            # warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                pred = predict_moments(current, model, dt, config)
                posterior, log_h = _update(pred, y, meas, config)
        except NumericalDivergence as exc:
            steps.append(
                FilterStep(
                    k=k,
                    predicted=pred,
                    updated=None,
                    log_likelihood_increment=float("nan"),
                    diverged=True,
                    reason=exc.reason,
                )
            )
            diverged_at = k
            break
        steps.append(FilterStep(k, pred, posterior, log_h))
        nll -= log_h
        current = posterior
        prev_t = t
    return FilterTrajectory(tuple(steps), nll, diverged_at, times)


def nll_objective(
    model: SdeModel,
    meas: MeasurementModel,
    ys,
    times,
    M0: MomentSet,
    config: FilterConfig | None = None,
) -> float:
    """Negative log-likelihood for optimizers: divergences become a huge
    finite sentinel so the surrounding region is rejected, never a NaN."""
    trajectory = run_moment_filter(model, meas, ys, times, M0, config)
    if trajectory.diverged or not math.isfinite(trajectory.nll):
        return NLL_SENTINEL
    return trajectory.nll
