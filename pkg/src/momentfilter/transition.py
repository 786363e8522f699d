"""Conditional moments of SDE transitions.

For dX = a(X) dt + b(X) dW the filter needs E[X_k^n | X_{k-1} = x] for every
multi-index n of degree <= 2N-1.  Two interchangeable approximations:

* Euler-Maruyama ("em"): one Gaussian step with mean x + a(x) dt and
  covariance b(x) b(x)^T dt; all Gaussian moments follow from the recurrence
  m_{n+e_i} = mu_i m_n + sum_j Sigma_{ij} n_j m_{n-e_j}.

* Taylor moment expansion ("tme"): the truncated generator series
  sum_{j<=J} (A^j g)(x) dt^j / j!  with g(x) = x^n and
  (A g)(x) = grad g(x)^T a(x) + 1/2 tr(b b^T Hess g(x)); the remainder is
  dropped.  Nested generator applications are produced either symbolically
  (differentiating the previous scalar field with sympy, compiled once per
  (model, index, J) and evaluated vectorized over quadrature nodes) or by
  nested central finite differences.

Models expose vectorized callables: drift maps (n, d) -> (n, d) and
dispersion maps (n, d) -> (n, d, d_w).  Model parameters that an optimizer
varies should be sympy symbols in the symbolic expressions with their values
in ``param_values``, so the compiled derivative cache survives parameter
changes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy

from momentfilter.errors import NonFiniteError
from momentfilter.momentspace import (
    MomentSet,
    _affine_transform_values,
    count_indices,
    graded_lex_indices,
)

__all__ = [
    "SdeModel",
    "TransitionConfig",
    "gaussian_moments",
    "gaussian_moment_set",
    "em_conditional_moments",
    "apply_generator",
    "tme_conditional_moment",
    "conditional_moments",
    "conditional_mean_cov",
    "state_symbols",
]

_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class SdeModel:
    """Drift/dispersion pair with optional symbolic twins.

    ``drift_sym`` / ``dispersion_sym`` are sympy expressions in
    ``state_symbols(d)`` (plus ``param_symbols``); they enable the analytic
    TME mode.  ``conditional_moments_fn(nodes, dt, max_degree)``, when given,
    bypasses both schemes (discrete-time models that know their conditional
    moments exactly).
    """

    d: int
    dw: int
    drift: Callable[[np.ndarray], np.ndarray]
    dispersion: Callable[[np.ndarray], np.ndarray]
    drift_sym: tuple | None = None
    dispersion_sym: tuple | None = None
    param_symbols: tuple = ()
    param_values: tuple = ()
    conditional_moments_fn: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.d < 1 or self.dw < 1:
            raise ValueError("d and dw must be >= 1")
        if len(self.param_symbols) != len(self.param_values):
            raise ValueError("param_symbols and param_values lengths differ")

    @property
    def has_symbolic(self) -> bool:
        return self.drift_sym is not None and self.dispersion_sym is not None


@dataclass(frozen=True)
class TransitionConfig:
    scheme: str = "tme"
    tme_order: int = 3
    derivative_mode: str = "analytic"
    fd_step: float | None = None

    def __post_init__(self):
        if self.scheme not in ("tme", "em"):
            raise ValueError(f"scheme must be 'tme' or 'em', got {self.scheme!r}")
        if self.tme_order < 1:
            raise ValueError("tme_order must be >= 1")
        if self.derivative_mode not in ("analytic", "fd"):
            raise ValueError("derivative_mode must be 'analytic' or 'fd'")
        if self.fd_step is not None and not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")


@lru_cache(maxsize=None)
def state_symbols(d: int) -> tuple:
    return sympy.symbols(f"x1:{d + 1}", real=True)


@lru_cache(maxsize=None)
def _frame_symbols(d: int) -> tuple:
    """Symbols for the standardized frame U = (X - c) / s."""
    u = sympy.symbols(f"u1:{d + 1}", real=True)
    c = sympy.symbols(f"c1:{d + 1}", real=True)
    s = sympy.symbols(f"s1:{d + 1}", positive=True)
    return u, c, s


# ----------------------------------------------------------------- Gaussian moments


@lru_cache(maxsize=None)
def _recurrence_plan(d: int, max_degree: int):
    """Per-index recipe for the Gaussian moment recurrence, in graded order."""
    indices = graded_lex_indices(d, max_degree)
    ranks = {idx: r for r, idx in enumerate(indices)}
    plan = []
    for rank, idx in enumerate(indices):
        if rank == 0:
            continue
        i = next(axis for axis, n in enumerate(idx) if n > 0)
        base = list(idx)
        base[i] -= 1
        base_rank = ranks[tuple(base)]
        terms = []
        for j, nj in enumerate(base):
            if nj > 0:
                sub = list(base)
                sub[j] -= 1
                terms.append((j, nj, ranks[tuple(sub)]))
        plan.append((rank, i, base_rank, tuple(terms)))
    return tuple(plan)


def _gaussian_moments_batch(mus: np.ndarray, Sigmas: np.ndarray, max_degree: int) -> np.ndarray:
    m, d = mus.shape
    out = np.empty((m, count_indices(d, max_degree)))
    out[:, 0] = 1.0
    for rank, i, base_rank, terms in _recurrence_plan(d, max_degree):
        acc = mus[:, i] * out[:, base_rank]
        for j, nj, sub_rank in terms:
            acc = acc + (nj * Sigmas[:, i, j]) * out[:, sub_rank]
        out[:, rank] = acc
    return out


def gaussian_moments(mu, Sigma, max_degree: int) -> np.ndarray:
    """All moments of Normal(mu, Sigma) up to max_degree, graded-lex ordered."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    d = mu.shape[0]
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 0:
        Sigma = Sigma.reshape(1, 1)
    if Sigma.shape != (d, d):
        raise ValueError(f"Sigma must be ({d},{d}), got {Sigma.shape}")
    if np.abs(Sigma - Sigma.T).max() > 1e-12 * max(1.0, np.abs(Sigma).max()):
        raise ValueError("Sigma must be symmetric")
    return _gaussian_moments_batch(mu[None, :], Sigma[None, :, :], max_degree)[0]


def gaussian_moment_set(mu, Sigma, order: int) -> MomentSet:
    """Raw MomentSet of a Gaussian law, ready for order-N quadrature."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    values = gaussian_moments(mu, Sigma, 2 * order - 1)
    return MomentSet.from_values(len(mu), order, values)


# ----------------------------------------------------------------- EM scheme


def _em_mean_cov(model: SdeModel, x: np.ndarray, dt: float):
    a = np.asarray(model.drift(x), dtype=float)
    b = np.asarray(model.dispersion(x), dtype=float)
    mean = x + a * dt
    cov = np.einsum("nik,njk->nij", b, b) * dt
    return mean, cov


def em_conditional_moments(model: SdeModel, x, dt: float, max_degree: int) -> np.ndarray:
    """Moments of the one-step Euler-Maruyama Gaussian at a single point x."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean, cov = _em_mean_cov(model, x[None, :], dt)
    return _gaussian_moments_batch(mean, cov, max_degree)[0]


# ----------------------------------------------------------------- generator (FD)


def _fd_gradient(f, x: np.ndarray, h_rel: float) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        h = h_rel * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def _fd_hessian(f, x: np.ndarray, h_rel: float) -> np.ndarray:
    d = x.shape[0]
    hess = np.empty((d, d))
    h = np.array([h_rel * max(1.0, abs(x[i])) for i in range(d)])
    f0 = f(x)
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        hess[i, i] = (f(xp) - 2 * f0 + f(xm)) / h[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [h[i], h[j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4 * h[i] * h[j])
    return hess


def apply_generator(
    model: SdeModel,
    g,
    x,
    grad=None,
    hess=None,
    fd_step: float | None = None,
) -> float:
    """One application of the SDE generator to a scalar function at x.

    Returns grad g(x)^T a(x) + 1/2 tr(b(x) b(x)^T Hess g(x)).  Analytic
    gradient/Hessian callbacks are used when supplied; otherwise central
    finite differences (step eps^(1/3) for the gradient, eps^(1/4) for the
    Hessian, each scaled by max(1, |x_i|)).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad_v = np.asarray(grad(x), dtype=float) if grad is not None else _fd_gradient(
        g, x, fd_step if fd_step is not None else _EPS ** (1.0 / 3.0)
    )
    hess_v = np.asarray(hess(x), dtype=float) if hess is not None else _fd_hessian(
        g, x, fd_step if fd_step is not None else _EPS**0.25
    )
    a = np.asarray(model.drift(x[None, :]), dtype=float)[0]
    b = np.asarray(model.dispersion(x[None, :]), dtype=float)[0]
    value = float(grad_v @ a + 0.5 * np.trace(b @ b.T @ hess_v))
    if not np.isfinite(value):
        raise NonFiniteError("generator application produced a non-finite value")
    return value


def _nested_generator_fd(
    model: SdeModel,
    index,
    level: int,
    x: np.ndarray,
    center: np.ndarray | None = None,
    scale: np.ndarray | None = None,
) -> float:
    if level == 0:
        u = x if center is None else (x - center) / scale
        return float(np.prod(u ** np.asarray(index)))

    def field(xx):
        return _nested_generator_fd(model, index, level - 1, xx, center, scale)

    return apply_generator(model, field, x)


# ----------------------------------------------------------------- TME (symbolic)


def _frame_args(d: int, param_symbols) -> tuple:
    us, cs, ss = _frame_symbols(d)
    return tuple(us) + tuple(cs) + tuple(ss) + tuple(param_symbols)


@lru_cache(maxsize=None)
def _tme_fields(drift_sym, dispersion_sym, param_symbols, d, index, order):
    """Sympy expressions (A^j g) for j = 0..order, g the monomial of `index`.

    The fields are derived for the standardized variable U = (X - c)/s with
    c, s symbolic, so one derivation serves every frame: U follows
    dU = (a(c+su)/s) dt + (b(c+su)/s) dW, and the raw-coordinate moment is
    the special case c=0, s=1.  Working directly in the target frame keeps
    every intermediate O(1) -- aggregating raw moments and shifting the
    result afterwards loses all precision once |c|/s is large, because the
    binomial change of basis amplifies round-off by (|c|/s)^degree.
    """
    xs = state_symbols(d)
    us, cs, ss = _frame_symbols(d)
    sub = {xs[i]: cs[i] + ss[i] * us[i] for i in range(d)}
    a = [sympy.expand(expr.subs(sub) / ss[i]) for i, expr in enumerate(drift_sym)]
    b = [[expr.subs(sub) / ss[i] for expr in row] for i, row in enumerate(dispersion_sym)]
    dw = len(b[0])
    bbT = [
        [sympy.expand(sum(b[i][k] * b[j][k] for k in range(dw))) for j in range(d)]
        for i in range(d)
    ]
    g = sympy.Integer(1)
    for i in range(d):
        g *= us[i] ** index[i]
    fields = [g]
    for _ in range(order):
        prev = fields[-1]
        nxt = sum(a[i] * sympy.diff(prev, us[i]) for i in range(d))
        nxt += sympy.Rational(1, 2) * sum(
            bbT[i][j] * sympy.diff(prev, us[i], us[j]) for i in range(d) for j in range(d)
        )
        fields.append(sympy.expand(nxt))
    return tuple(fields)


@lru_cache(maxsize=None)
def _tme_compiled(drift_sym, dispersion_sym, param_symbols, d, index, order):
    """Per-index lambdified (A^j g), j = 0..order (single-point evaluations)."""
    fields = _tme_fields(drift_sym, dispersion_sym, param_symbols, d, index, order)
    args = _frame_args(d, param_symbols)
    return tuple(sympy.lambdify(args, f, modules="numpy") for f in fields)


@lru_cache(maxsize=None)
def _tme_compiled_stack(drift_sym, dispersion_sym, param_symbols, d, max_degree, order):
    """One lambdified function evaluating (A^j g) for every monomial g with
    0 < |index| <= max_degree and every j <= order, with common subexpressions
    shared across the whole basis (the fields overlap heavily)."""
    indices = graded_lex_indices(d, max_degree)[1:]
    exprs = []
    for idx in indices:
        exprs.extend(
            _tme_fields(drift_sym, dispersion_sym, param_symbols, d, idx, order)
        )
    args = _frame_args(d, param_symbols)
    return sympy.lambdify(args, exprs, modules="numpy", cse=True)


def _tme_values_batch(
    model: SdeModel,
    nodes: np.ndarray,
    dt: float,
    index,
    order: int,
    center: np.ndarray | None = None,
    scale: np.ndarray | None = None,
) -> np.ndarray:
    d = model.d
    center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    fns = _tme_compiled(
        model.drift_sym, model.dispersion_sym, model.param_symbols, d, tuple(index), order
    )
    u = (nodes - center[None, :]) / scale[None, :]
    cols = [u[:, i] for i in range(d)]
    cols += [float(c) for c in center]
    cols += [float(s) for s in scale]
    cols += [float(p) for p in model.param_values]
    n = nodes.shape[0]
    acc = np.zeros(n)
    for j, fn in enumerate(fns):
        term = np.asarray(fn(*cols), dtype=float)
        acc = acc + np.broadcast_to(term, (n,)) * (dt**j / math.factorial(j))
    return acc


def _tme_values_stack(
    model: SdeModel,
    nodes: np.ndarray,
    dt: float,
    max_degree: int,
    order: int,
    center: np.ndarray | None = None,
    scale: np.ndarray | None = None,
) -> np.ndarray:
    """All conditional moments 0 < |index| <= max_degree in one compiled call.

    Returns (n_nodes, n_indices - 1) aligned with graded_lex_indices[1:].
    """
    d = model.d
    center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    fn = _tme_compiled_stack(
        model.drift_sym, model.dispersion_sym, model.param_symbols, d, max_degree, order
    )
    u = (nodes - center[None, :]) / scale[None, :]
    cols = [u[:, i] for i in range(d)]
    cols += [float(c) for c in center]
    cols += [float(s) for s in scale]
    cols += [float(p) for p in model.param_values]
    flat = fn(*cols)
    n = nodes.shape[0]
    n_idx = len(flat) // (order + 1)
    weights = np.array([dt**j / math.factorial(j) for j in range(order + 1)])
    out = np.zeros((n, n_idx))
    pos = 0
    for r in range(n_idx):
        for j in range(order + 1):
            term = np.asarray(flat[pos], dtype=float)
            out[:, r] += np.broadcast_to(term, (n,)) * weights[j]
            pos += 1
    return out


def _tme_point_fd(
    model: SdeModel, x, dt: float, index, order: int, center=None, scale=None
) -> float:
    total = 0.0
    for j in range(order + 1):
        total += (
            _nested_generator_fd(model, tuple(index), j, x, center, scale)
            * dt**j
            / math.factorial(j)
        )
    return total


def tme_conditional_moment(
    model: SdeModel, x, dt: float, index, order: int, derivative_mode: str = "analytic"
) -> float:
    """Taylor-expanded E[X_k^index | X_{k-1} = x], remainder dropped."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if derivative_mode == "analytic":
        if not model.has_symbolic:
            raise ValueError(
                "analytic TME needs drift_sym/dispersion_sym; use derivative_mode='fd'"
            )
        return float(_tme_values_batch(model, x[None, :], dt, tuple(index), order)[0])
    if derivative_mode != "fd":
        raise ValueError(f"unknown derivative_mode {derivative_mode!r}")
    return _tme_point_fd(model, x, dt, tuple(index), order)


# ----------------------------------------------------------------- dispatch


def conditional_moments(
    model: SdeModel,
    nodes: np.ndarray,
    dt: float,
    max_degree: int,
    config: TransitionConfig,
    center=None,
    scale=None,
) -> np.ndarray:
    """E[X_k^n | X_{k-1} = node] for all |n| <= max_degree, vectorized over nodes.

    Returns (n_nodes, n_indices) in graded-lex index order.  When `center` and
    `scale` are given, the monomials are those of the standardized variable
    U = (X_k - center)/scale instead -- computed directly in that frame, which
    stays well-conditioned even when the state is many standard deviations
    away from the origin (shifting aggregated raw moments afterwards would
    amplify round-off by (|center|/scale)^degree).
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    d = model.d
    if center is not None or scale is not None:
        center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    if model.conditional_moments_fn is not None:
        raw = np.asarray(model.conditional_moments_fn(nodes, dt, max_degree), dtype=float)
        if center is None:
            return raw
        out = np.empty_like(raw)
        for q in range(raw.shape[0]):
            out[q] = _affine_transform_values(raw[q], d, max_degree, center, scale)
        return out
    if config.scheme == "em":
        mean, cov = _em_mean_cov(model, nodes, dt)
        if center is not None:
            mean = (mean - center[None, :]) / scale[None, :]
            cov = cov / np.outer(scale, scale)[None, :, :]
        return _gaussian_moments_batch(mean, cov, max_degree)
    indices = graded_lex_indices(d, max_degree)
    out = np.empty((nodes.shape[0], len(indices)))
    out[:, 0] = 1.0
    if config.derivative_mode == "analytic":
        if not model.has_symbolic:
            raise ValueError(
                "analytic TME needs drift_sym/dispersion_sym; use derivative_mode='fd'"
            )
        out[:, 1:] = _tme_values_stack(
            model, nodes, dt, max_degree, config.tme_order, center, scale
        )
    else:
        for r, idx in enumerate(indices[1:], start=1):
            out[:, r] = [
                _tme_point_fd(model, x, dt, idx, config.tme_order, center, scale)
                for x in nodes
            ]
    return out


def conditional_mean_cov(
    model: SdeModel, nodes: np.ndarray, dt: float, config: TransitionConfig
):
    """Per-node conditional mean (n, d) and covariance (n, d, d) of one step."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if config.scheme == "em" and model.conditional_moments_fn is None:
        return _em_mean_cov(model, nodes, dt)
    d = model.d
    moments = conditional_moments(model, nodes, dt, 2, config)
    indices = graded_lex_indices(d, 2)
    ranks = {idx: r for r, idx in enumerate(indices)}
    mean = np.empty((nodes.shape[0], d))
    second = np.empty((nodes.shape[0], d, d))
    for i in range(d):
        e_i = tuple(1 if k == i else 0 for k in range(d))
        mean[:, i] = moments[:, ranks[e_i]]
        for j in range(i, d):
            idx = tuple((1 if k == i else 0) + (1 if k == j else 0) for k in range(d))
            second[:, i, j] = second[:, j, i] = moments[:, ranks[idx]]
    cov = second - np.einsum("ni,nj->nij", mean, mean)
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return mean, cov
