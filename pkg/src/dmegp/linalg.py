"""Dense symmetric-positive-definite primitives for GP likelihoods.

Only three operations are exposed: ``cholesky`` (with a deterministic
jitter-escalation policy), ``chol_solve`` and ``log_det``. Everything the
rest of the package needs from a covariance matrix goes through them, which
keeps the numerical contract small and testable. Factorization and
triangular solves are delegated to LAPACK via numpy/scipy; all arithmetic is
double precision because GP log-likelihoods are too ill-conditioned for
single precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, NumericError

__all__ = [
    "JitterConfig",
    "SpdMatrix",
    "CholeskyFactor",
    "DEFAULT_JITTER",
    "cholesky",
    "chol_solve",
    "log_det",
]


@dataclass(frozen=True)
class JitterConfig:
    """Escalation ladder of diagonal boosts, as multiples of mean(diag).

    The ladder is tried in order; the first level at which factorization
    succeeds wins, so the result is a deterministic function of the input.
    """

    scales: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)

    def ladder(self, base: float) -> tuple[float, ...]:
        return tuple(s * base for s in self.scales)


DEFAULT_JITTER = JitterConfig()


@dataclass(frozen=True)
class SpdMatrix:
    """A dense symmetric matrix intended to be positive definite.

    Symmetry is validated at construction; positive definiteness is only
    established by ``cholesky`` (possibly after jitter stabilization).
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", e)
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] < 1:
            raise DimensionMismatch(f"expected a square matrix, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise NumericError("matrix entries are not all finite")
        if not np.array_equal(e, e.T):
            # Tolerate roundoff-level asymmetry but nothing else.
            if not np.allclose(e, e.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(e).max()))):
                raise DimensionMismatch("matrix is not symmetric")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T = source + jitter * I."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def cholesky(m: SpdMatrix, jitter_policy: JitterConfig = DEFAULT_JITTER) -> CholeskyFactor:
    """Factor ``m + jitter * I`` with the smallest jitter that succeeds.

    Jitter levels are the policy's scales times mean(diag(m)); a
    non-positive mean diagonal falls back to a unit base so the ladder stays
    meaningful. Raises NotPositiveDefinite when even the top level fails.
    """
    a = m.entries
    base = float(np.mean(np.diag(a)))
    if not base > 0.0:
        base = 1.0
    last_exc = None
    for level in jitter_policy.ladder(base):
        try:
            stabilized = a if level == 0.0 else a + level * np.eye(m.dim)
            lower = np.linalg.cholesky(stabilized)
        except np.linalg.LinAlgError as exc:
            last_exc = exc
            continue
        return CholeskyFactor(lower=lower, jitter=level)
    raise NotPositiveDefinite(
        f"factorization failed for dim={m.dim} even at max jitter "
        f"{jitter_policy.scales[-1]:g} * mean(diag)"
    ) from last_exc


def chol_solve(f: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b by forward then back substitution.

    ``b`` may be a vector or a matrix of stacked right-hand-side columns.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"rhs length {b.shape[0]} != factor dim {f.dim}")
    z = solve_triangular(f.lower, b, lower=True)
    return solve_triangular(f.lower.T, z, lower=False)


def log_det(f: CholeskyFactor) -> float:
    """log-determinant of the factored matrix: 2 * sum(log(diag(L)))."""
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))
