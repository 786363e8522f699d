"""Exception taxonomy for numerical failure modes.

Every failure that the moment filter treats as a recoverable *divergence*
(rather than a bug) derives from :class:`NumericalDivergence`, which carries a
short machine-readable ``reason`` used in trajectory records and CSV output.
"""
from __future__ import annotations


class NumericalDivergence(Exception):
    """A numerical failure the filter records as a structured divergence."""

    reason: str = "numerical failure"

    def __init__(self, message: str = "", context: dict | None = None):
        super().__init__(message or self.reason)
        self.context = context or {}


class NotPositiveDefiniteError(NumericalDivergence):
    """A Gram matrix failed the Cholesky factorization."""

    reason = "gram not positive definite"


class EigenDecompositionError(NumericalDivergence):
    """The symmetric eigensolver failed to converge."""

    reason = "eigendecomposition failed"


class NonFiniteError(NumericalDivergence):
    """A NaN or infinity appeared where a finite value was required."""

    reason = "non-finite values"


class NonPositiveNormalizerError(NumericalDivergence):
    """The update-step likelihood normalizer came out non-positive."""

    reason = "nonpositive normalizer"


class ConfigError(Exception):
    """An experiment configuration failed validation (CLI exit code 2)."""
