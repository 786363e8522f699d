"""Quadrature rules generated from moment data.

Given every moment of degree <= 2N-1 of a d-dimensional law, the monomials of
degree <= N-1 span an S-dimensional space, S = C(N-1+d, d).  Their Gram
matrix G (inner products under the law) is a matrix of moments; so is each
coordinate "multiplication by x_i" operator H_i.  Cholesky-factoring
G = L L^T orthonormalizes the basis, the operators become the symmetric
matrices L^{-1} H_i L^{-T}, and their eigendecompositions produce per-
coordinate node values.  The rule takes all S^d Cartesian combinations of
those values; the weight of combination (n_1, ..., n_d) is the chain of
eigenvector overlaps

    w = <e_0, u_{n_1}> <u_{n_1}, u_{n_2}> ... <u_{n_{d-1}}, u_{n_d}> <u_{n_d}, e_0>

taken in state-coordinate order.  Weights may be negative but always sum to 1,
and the rule integrates every polynomial of degree <= 2N-1 exactly.  For d=1
this is the classical Jacobi-matrix construction: the orthonormalized operator
is tridiagonal, its eigenvalues are the nodes, and the weights are the squared
first components of the eigenvectors.

Rules built from standardized moment sets are mapped back to original
coordinates (node -> scale * node + center); the weights are unaffected.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from momentfilter.errors import (
    EigenDecompositionError,
    NonFiniteError,
    NotPositiveDefiniteError,
    NumericalDivergence,
)
from momentfilter.momentspace import MomentSet, build_gram, build_hankels

__all__ = [
    "QuadratureRule",
    "cholesky_pd",
    "ldl_clipped",
    "orthonormalized_hankels",
    "jacobi_matrix_1d",
    "sym_eig",
    "moment_quadrature",
    "integrate",
]

logger = logging.getLogger(__name__)

_SYMMETRY_RTOL = 1e-8


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (n_nodes, d) and possibly-negative weights (n_nodes,) summing to 1."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int
    d: int

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape[0] != weights.shape[0]:
            raise ValueError("node and weight counts differ")
        if nodes.shape[1] != self.d:
            raise ValueError(f"nodes must be (n, {self.d}), got {nodes.shape}")
        for name, arr in (("nodes", nodes), ("weights", weights)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def negative_mass(self) -> float:
        """Total magnitude of negative weights (diagnostic only)."""
        w = self.weights
        return float(-w[w < 0].sum())


def cholesky_pd(G: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = G, or NotPositiveDefiniteError.

    Failure is detected by the factorization itself (non-positive pivot), not
    by a separate eigenvalue pre-check.
    """
    try:
        return np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc), context={"size": G.shape[0]}) from exc


def ldl_clipped(G: np.ndarray, epsilon: float = 1e-10) -> np.ndarray:
    """Cholesky-like factor of a positive-definite matrix near G.

    Runs an unpivoted LDL^T factorization, clipping every diagonal pivot of D
    below `epsilon` up to `epsilon` as it is produced, and returns
    L * sqrt(D).  Always succeeds for symmetric input; when G is already
    positive definite with smallest pivot >= epsilon the result equals
    cholesky_pd(G).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    A = np.asarray(G, dtype=float)
    n = A.shape[0]
    L = np.eye(n)
    D = np.empty(n)
    for j in range(n):
        D[j] = max(A[j, j] - (L[j, :j] ** 2) @ D[:j], epsilon)
        if j + 1 < n:
            L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ (D[:j] * L[j, :j])) / D[j]
    return L * np.sqrt(D)[None, :]


def orthonormalized_hankels(
    G: np.ndarray, hankels: np.ndarray, factor: np.ndarray | None = None
) -> np.ndarray:
    """The multiplication operators in the orthonormalized basis.

    Returns L^{-1} H_i L^{-T} for each coordinate matrix H_i, computed with
    two triangular solves and symmetrized by averaging with the transpose.
    Asymmetry beyond 1e-8 relative (round-off should be far smaller) is an
    error.  `factor` lets callers pass a repaired Cholesky-like factor.
    """
    L = cholesky_pd(G) if factor is None else factor
    H = np.asarray(hankels, dtype=float)
    single = H.ndim == 2
    stack = H[None] if single else H
    out = np.empty_like(stack)
    for i, Hi in enumerate(stack):
        # check_finite=False: an overflow inside the solves must reach the
        # structural NonFiniteError below, not scipy's input validation
        Y = solve_triangular(L, Hi, lower=True, check_finite=False)
        B = solve_triangular(L, Y.T, lower=True, check_finite=False).T
        denom = max(1.0, float(np.abs(B).max()))
        asym = float(np.abs(B - B.T).max())
        if not np.isfinite(B).all():
            raise NonFiniteError("orthonormalized operator has non-finite entries")
        if asym > _SYMMETRY_RTOL * denom:
            raise NumericalDivergence(
                f"operator asymmetry {asym:.3e} exceeds {_SYMMETRY_RTOL:.0e} relative",
                context={"coordinate": i},
            )
        out[i] = 0.5 * (B + B.T)
    return out[0] if single else out


def jacobi_matrix_1d(M: MomentSet) -> np.ndarray:
    """Symmetric tridiagonal N x N Jacobi matrix from 1-d moments.

    The orthonormalized multiplication operator of a 1-d law is tridiagonal
    up to round-off; off-tridiagonal entries are asserted <= 1e-8 and zeroed.
    Diagonal = recurrence alphas, off-diagonal = betas.
    """
    if M.d != 1:
        raise ValueError("jacobi_matrix_1d requires d = 1")
    B = orthonormalized_hankels(build_gram(M), build_hankels(M)[0])
    off = B - np.diag(np.diag(B))
    off -= np.diag(np.diag(B, 1), 1) + np.diag(np.diag(B, -1), -1)
    max_off = float(np.abs(off).max()) if off.size else 0.0
    if max_off > 1e-8:
        raise NumericalDivergence(
            f"operator is not tridiagonal: off-band magnitude {max_off:.3e}"
        )
    J = np.diag(np.diag(B)) + np.diag(np.diag(B, 1), 1) + np.diag(np.diag(B, -1), -1)
    return J


def sym_eig(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix with a fixed sign convention.

    Returns (eigenvalues ascending, eigenvector columns).  Each eigenvector's
    first significant component (magnitude > 1e-12 of the column max) is made
    positive so results are deterministic.
    """
    A = np.asarray(A, dtype=float)
    denom = max(1.0, float(np.abs(A).max()))
    if float(np.abs(A - A.T).max()) > 1e-10 * denom:
        raise ValueError("matrix is not symmetric within 1e-10 relative")
    try:
        eigenvalues, vectors = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise EigenDecompositionError(str(exc)) from exc
    col_max = np.abs(vectors).max(axis=0)
    significant = np.abs(vectors) > 1e-12 * col_max[None, :]
    first = significant.argmax(axis=0)
    signs = np.sign(vectors[first, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return eigenvalues, vectors * signs[None, :]


def moment_quadrature(
    M: MomentSet,
    repair: str = "none",
    clip_epsilon: float = 1e-10,
    weight_threshold: float = 0.0,
) -> QuadratureRule:
    """Build the S^d-node quadrature rule of order N from a moment set.

    repair: "none" raises NotPositiveDefiniteError when the Gram matrix fails
    Cholesky; "clip" retries once with the clipped-LDL factor (epsilon =
    `clip_epsilon`).  `weight_threshold` > 0 drops nodes with |w| <= threshold
    after construction; the default 0 keeps every node, including zero and
    negative weights.
    """
    G = build_gram(M)
    hankels = build_hankels(M)
    if repair == "none":
        L = cholesky_pd(G)
    elif repair == "clip":
        try:
            L = cholesky_pd(G)
        except NotPositiveDefiniteError:
            L = ldl_clipped(G, clip_epsilon)
    else:
        raise ValueError(f"unknown repair policy {repair!r}")
    operators = orthonormalized_hankels(G, hankels, factor=L)

    eigenvalues = []
    eigenvectors = []
    for B in operators:
        lam, U = sym_eig(B)
        eigenvalues.append(lam)
        eigenvectors.append(U)

    # weights: chain of eigenbasis overlaps in coordinate order 1..d
    weights = eigenvectors[0][0, :].copy()
    for i in range(M.d - 1):
        cross = eigenvectors[i].T @ eigenvectors[i + 1]
        weights = weights[..., :, None] * cross
    weights = weights * eigenvectors[-1][0, :]
    weights = weights.reshape(-1)

    # nodes: Cartesian grid, last coordinate fastest (matches the weight layout)
    grids = np.meshgrid(*eigenvalues, indexing="ij")
    nodes_std = np.stack([g.reshape(-1) for g in grids], axis=1)
    nodes = M.center[None, :] + M.scale[None, :] * nodes_std

    if weight_threshold > 0.0:
        keep = np.abs(weights) > weight_threshold
        nodes, weights = nodes[keep], weights[keep]

    rule = QuadratureRule(nodes=nodes, weights=weights, order=M.order, d=M.d)
    neg = rule.negative_mass()
    if neg > 0:
        logger.debug("moment_quadrature: negative weight mass %.3e", neg)
    return rule


def integrate(rule: QuadratureRule, f) -> float:
    """Sum w_q * f(node_q) in fixed node order.

    `f` maps a length-d vector to a real; a non-finite value at any node is a
    numerical failure.
    """
    values = np.array([float(f(node)) for node in rule.nodes])
    if not np.isfinite(values).all():
        raise NonFiniteError("integrand returned a non-finite value at a node")
    return float(rule.weights @ values)
