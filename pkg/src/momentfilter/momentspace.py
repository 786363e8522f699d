"""Multi-index bookkeeping and moment vectors for d-dimensional laws.

A *multi-index* ``n = (n_1, ..., n_d)`` of non-negative integers addresses the
moment ``m_n = E[X_1^{n_1} ... X_d^{n_d}]``.  Everything in this package
enumerates multi-indices in graded lexicographic order: ascending total degree
first, plain lexicographic comparison inside each degree block, e.g. for d=2

    (0,0), (0,1), (1,0), (0,2), (1,1), (2,0), (0,3), ...

A :class:`MomentSet` stores every moment of degree <= 2N-1 as a dense vector
in that order.  The stored values may describe a standardized variable
``U = (X - center) / scale`` (coordinate-wise); ``center = 0, scale = 1``
means raw moments of ``X`` itself.  Standardizing around the running mean and
standard deviation keeps the Gram matrices used by the quadrature well
conditioned, and generated rules are mapped back to the original coordinates
afterwards, so the choice of frame is invisible to callers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MultiIndex = tuple[int, ...]

__all__ = [
    "MultiIndex",
    "MomentSet",
    "graded_lex_indices",
    "multi_index_rank",
    "count_indices",
    "standardize",
    "build_gram",
    "build_hankels",
]


def _compositions(total: int, d: int):
    """Yield all d-tuples of non-negative ints summing to `total`, lex ascending."""
    if d == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, d - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def graded_lex_indices(d: int, max_degree: int) -> tuple[MultiIndex, ...]:
    """All multi-indices of length d with degree <= max_degree, graded-lex ordered."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if max_degree < 0:
        raise ValueError(f"max_degree must be >= 0, got {max_degree}")
    out: list[MultiIndex] = []
    for degree in range(max_degree + 1):
        out.extend(_compositions(degree, d))
    return tuple(out)


def count_indices(d: int, max_degree: int) -> int:
    """Number of multi-indices of length d with degree <= max_degree."""
    return math.comb(max_degree + d, d)


def multi_index_rank(index: MultiIndex) -> int:
    """Position of `index` in the graded-lex enumeration, independent of max_degree.

    O(degree * d): count all indices of strictly smaller degree, then the
    lexicographic rank inside the degree block.
    """
    d = len(index)
    if d < 1 or any(n < 0 for n in index):
        raise ValueError(f"invalid multi-index {index!r}")
    degree = sum(index)
    rank = math.comb(degree - 1 + d, d) if degree > 0 else 0
    remaining = degree
    for pos in range(d - 1):
        free = d - pos - 1  # coordinates to the right of `pos`
        for smaller in range(index[pos]):
            # compositions of (remaining - smaller) into `free` parts
            rank += math.comb(remaining - smaller + free - 1, free - 1)
        remaining -= index[pos]
    return rank


@lru_cache(maxsize=None)
def _rank_map(d: int, max_degree: int) -> dict[MultiIndex, int]:
    return {idx: r for r, idx in enumerate(graded_lex_indices(d, max_degree))}


@lru_cache(maxsize=None)
def _pascal(n: int) -> np.ndarray:
    """(n+1)x(n+1) table of binomial coefficients C[i, j] = i choose j."""
    table = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(i + 1):
            table[i, j] = math.comb(i, j)
    return table


@lru_cache(maxsize=None)
def _axis_groups(d: int, max_degree: int, axis: int) -> np.ndarray:
    """Gather table for single-axis moment transforms.

    Row g collects the ranks of all indices sharing the same exponents on the
    other coordinates; column k is the rank of the member whose `axis`
    exponent equals k, or -1 where the degree bound is exceeded.
    """
    indices = graded_lex_indices(d, max_degree)
    table: list[list[int]] = []
    group_of: dict[MultiIndex, int] = {}
    for rank, idx in enumerate(indices):
        signature = idx[:axis] + idx[axis + 1 :]
        g = group_of.get(signature)
        if g is None:
            g = len(table)
            group_of[signature] = g
            table.append([-1] * (max_degree + 1))
        table[g][idx[axis]] = rank
    return np.asarray(table, dtype=np.intp)


def _binomial_shift_matrix(max_degree: int, shift: float, inv_scale: float) -> np.ndarray:
    """Lower-triangular B with B[n, k] = C(n, k) * (-shift)^(n-k) * inv_scale^n.

    Applying B to the vector of axis moments (E[V^k])_k yields the moments of
    (V - shift) * inv_scale.
    """
    n = np.arange(max_degree + 1)
    diffs = np.maximum(n[:, None] - n[None, :], 0)
    with np.errstate(invalid="ignore"):
        pow_shift = (-shift) ** diffs
    if shift == 0.0:
        # 0**0 must be 1 on the diagonal; numpy already yields that, but
        # guard against -0.0 producing negative zeros off the diagonal.
        pow_shift = np.where(diffs == 0, 1.0, 0.0)
    B = _pascal(max_degree) * pow_shift
    B *= (inv_scale ** n)[:, None]
    return np.tril(B)


def _affine_transform_values(
    values: np.ndarray, d: int, max_degree: int, shift: np.ndarray, scale: np.ndarray
) -> np.ndarray:
    """Moments of (U - shift) / scale (coordinate-wise) from moments of U."""
    out = np.array(values, dtype=float, copy=True)
    for axis in range(d):
        if shift[axis] == 0.0 and scale[axis] == 1.0:
            continue
        table = _axis_groups(d, max_degree, axis)
        valid = table >= 0
        padded = np.where(valid, out[np.maximum(table, 0)], 0.0)
        B = _binomial_shift_matrix(max_degree, float(shift[axis]), 1.0 / float(scale[axis]))
        transformed = padded @ B.T
        out[table[valid]] = transformed[valid]
    return out


def _as_vector(x, d: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"{name} must be a scalar or length-{d} vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class MomentSet:
    """Every moment of degree <= 2N-1 of a d-dimensional random variable.

    ``values[r]`` is ``E[U^n]`` where ``n`` is the r-th graded-lex multi-index
    and ``U = (X - center) / scale`` coordinate-wise.  ``order`` is the
    quadrature order N the set supports.
    """

    d: int
    order: int
    values: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        values = np.asarray(self.values, dtype=float)
        expected = count_indices(self.d, self.max_degree)
        if values.shape != (expected,):
            raise ValueError(
                f"values must have shape ({expected},) for d={self.d}, "
                f"N={self.order}; got {values.shape}"
            )
        if not np.isfinite(values).all():
            raise ValueError("moment values must be finite")
        if abs(values[0] - 1.0) > 1e-6:
            raise ValueError(f"zeroth moment must be 1, got {values[0]!r}")
        center = _as_vector(self.center, self.d, "center")
        scale = _as_vector(self.scale, self.d, "scale")
        if not np.isfinite(center).all():
            raise ValueError("center must be finite")
        if not (np.isfinite(scale).all() and (scale > 0).all()):
            raise ValueError("scale entries must be finite and > 0")
        for name, arr in (("values", values), ("center", center), ("scale", scale)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_values(cls, d: int, order: int, values, center=0.0, scale=1.0) -> "MomentSet":
        return cls(d=d, order=order, values=np.asarray(values, dtype=float),
                   center=_as_vector(center, d, "center"), scale=_as_vector(scale, d, "scale"))

    # -- basic queries ---------------------------------------------------------

    @property
    def max_degree(self) -> int:
        return 2 * self.order - 1

    @property
    def indices(self) -> tuple[MultiIndex, ...]:
        return graded_lex_indices(self.d, self.max_degree)

    def get(self, index: MultiIndex) -> float:
        """Stored (standardized-frame) moment at `index`."""
        idx = tuple(int(n) for n in index)
        rank = _rank_map(self.d, self.max_degree).get(idx)
        if rank is None:
            raise KeyError(f"index {idx} outside degree bound {self.max_degree} for d={self.d}")
        return float(self.values[rank])

    def is_raw(self) -> bool:
        return bool((self.center == 0.0).all() and (self.scale == 1.0).all())

    def mean(self) -> np.ndarray:
        """Mean of X in original coordinates."""
        ranks = _rank_map(self.d, self.max_degree)
        u1 = np.array([self.values[ranks[_unit(self.d, i)]] for i in range(self.d)])
        return self.center + self.scale * u1

    def variance(self) -> np.ndarray:
        """Per-coordinate variance of X in original coordinates."""
        if self.order < 2:
            raise ValueError("variance needs second moments (order >= 2)")
        ranks = _rank_map(self.d, self.max_degree)
        u1 = np.array([self.values[ranks[_unit(self.d, i)]] for i in range(self.d)])
        u2 = np.array([self.values[ranks[_unit(self.d, i, 2)]] for i in range(self.d)])
        return self.scale**2 * (u2 - u1**2)

    # -- changes of frame --------------------------------------------------

    def standardize_to(self, center, scale) -> "MomentSet":
        """Re-express the same law with a new center/scale frame.

        Composes the affine maps directly (never round-trips through raw
        moments): if X = c + s*U then U' = (X - c')/s' = (U - mu)/sigma with
        mu = (c' - c)/s and sigma = s'/s per coordinate.
        """
        new_center = _as_vector(center, self.d, "center")
        new_scale = _as_vector(scale, self.d, "scale")
        if not (new_scale > 0).all():
            raise ValueError("scale entries must be > 0")
        mu = (new_center - self.center) / self.scale
        sigma = new_scale / self.scale
        values = _affine_transform_values(self.values, self.d, self.max_degree, mu, sigma)
        values[0] = 1.0
        return MomentSet(self.d, self.order, values, new_center, new_scale)

    def to_raw(self) -> "MomentSet":
        return self.standardize_to(np.zeros(self.d), np.ones(self.d))

    def restandardized(self) -> "MomentSet":
        """Re-center at the current mean, re-scale by current std per coordinate."""
        if self.order < 2:
            return self.standardize_to(self.mean(), np.ones(self.d))
        var = self.variance()
        sigma = np.where(var > 1e-24, np.sqrt(np.maximum(var, 0.0)), 1.0)
        return self.standardize_to(self.mean(), sigma)

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "N": self.order,
            "center": [float(c) for c in self.center],
            "scale": [float(s) for s in self.scale],
            "moments": [
                {"index": list(idx), "value": float(v)}
                for idx, v in zip(self.indices, self.values)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: dict) -> "MomentSet":
        try:
            d = int(data["d"])
            order = int(data["N"])
            center = np.asarray(data["center"], dtype=float)
            scale = np.asarray(data["scale"], dtype=float)
            entries = data["moments"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed MomentSet JSON: {exc}") from exc
        max_degree = 2 * order - 1
        ranks = _rank_map(d, max_degree)
        values = np.full(count_indices(d, max_degree), np.nan)
        for entry in entries:
            idx = tuple(int(n) for n in entry["index"])
            rank = ranks.get(idx)
            if rank is None:
                raise ValueError(f"moment index {idx} outside degree bound for d={d}, N={order}")
            if not np.isnan(values[rank]):
                raise ValueError(f"duplicate moment index {idx}")
            values[rank] = float(entry["value"])
        if np.isnan(values).any():
            missing = [idx for idx, r in ranks.items() if np.isnan(values[r])]
            raise ValueError(f"missing moment indices, e.g. {missing[:3]}")
        return cls(d=d, order=order, values=values, center=center, scale=scale)

    @classmethod
    def from_json(cls, text: str) -> "MomentSet":
        return cls.from_json_dict(json.loads(text))


@lru_cache(maxsize=None)
def _unit(d: int, axis: int, power: int = 1) -> MultiIndex:
    idx = [0] * d
    idx[axis] = power
    return tuple(idx)


def standardize(M: MomentSet, mu, sigma) -> MomentSet:
    """Moments of (X - mu)/sigma from raw moments, via binomial expansion.

    `sigma` may be a positive scalar (broadcast to all coordinates) or a
    per-coordinate vector.  The new frame (mu, sigma) is stored on the result
    so quadrature rules can be mapped back.
    """
    if not M.is_raw():
        raise ValueError("standardize expects raw moments (center 0, scale 1)")
    sigma_vec = _as_vector(sigma, M.d, "sigma")
    if not (sigma_vec > 0).all():
        raise ValueError("sigma must be > 0")
    return M.standardize_to(_as_vector(mu, M.d, "mu"), sigma_vec)


# -- Gram / Hankel assembly ---------------------------------------------------


@lru_cache(maxsize=None)
def _gram_table(d: int, order: int) -> np.ndarray:
    basis = graded_lex_indices(d, order - 1)
    ranks = _rank_map(d, 2 * order - 1)
    S = len(basis)
    table = np.empty((S, S), dtype=np.intp)
    for i, a in enumerate(basis):
        for j, b in enumerate(basis):
            table[i, j] = ranks[tuple(x + y for x, y in zip(a, b))]
    return table


@lru_cache(maxsize=None)
def _hankel_tables(d: int, order: int) -> np.ndarray:
    basis = graded_lex_indices(d, order - 1)
    ranks = _rank_map(d, 2 * order - 1)
    S = len(basis)
    tables = np.empty((d, S, S), dtype=np.intp)
    for axis in range(d):
        e = _unit(d, axis)
        for i, a in enumerate(basis):
            for j, b in enumerate(basis):
                tables[axis, i, j] = ranks[tuple(x + y + z for x, y, z in zip(a, b, e))]
    return tables


def build_gram(M: MomentSet) -> np.ndarray:
    """S x S Gram matrix of the degree <= N-1 monomial basis, S = C(N-1+d, d).

    Entry (i, j) is the stored moment at index n_i + n_j.  Built in the
    moment set's own (standardized) frame.
    """
    return M.values[_gram_table(M.d, M.order)]


def build_hankels(M: MomentSet) -> np.ndarray:
    """The d coordinate-multiplication Hankel matrices, stacked (d, S, S).

    Matrix i has entry (u, v) equal to the moment at n_u + n_v + e_i.
    """
    return M.values[_hankel_tables(M.d, M.order)]
