"""RBF covariance with per-dimension relevance on embedded inputs.

Hyperparameters live in log space (one length-scale per embedding
dimension, a signal variance and a noise variance) so gradient ascent is
unconstrained and the exponentiated values stay positive by construction.
``kernel_matrix`` folds the noise variance into the diagonal, matching the
single-matrix form of the per-patient marginal likelihood; the noise-free
matrix needed for cross-covariances and latent (classification) priors is
available separately.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .linalg import SpdMatrix
from .nn import Embedding

__all__ = [
    "KernelParams",
    "KernelGradients",
    "default_kernel_params",
    "rbf_ard",
    "rbf_matrix",
    "kernel_matrix",
    "kernel_grads",
    "kp_vector",
    "kp_from_vector",
]


@dataclass(frozen=True)
class KernelParams:
    """Per-patient covariance hyperparameters, stored as logs."""

    log_lengthscales: np.ndarray  # (E,)
    log_signal_variance: float
    log_noise_variance: float

    def __post_init__(self):
        ls = np.asarray(self.log_lengthscales, dtype=np.float64)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_variance", float(self.log_signal_variance))
        object.__setattr__(self, "log_noise_variance", float(self.log_noise_variance))
        if ls.ndim != 1:
            raise DimensionMismatch("log_lengthscales must be a vector")
        if not (np.all(np.isfinite(ls)) and np.isfinite(self.log_signal_variance)
                and np.isfinite(self.log_noise_variance)):
            raise DimensionMismatch("kernel hyperparameters must be finite")

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)


@dataclass
class KernelGradients:
    """Gradients w.r.t. the three log-parameter groups."""

    log_lengthscales: np.ndarray
    log_signal_variance: float
    log_noise_variance: float


def default_kernel_params(dim: int) -> KernelParams:
    """Unit length-scales and signal variance, noise variance 0.1."""
    return KernelParams(
        log_lengthscales=np.zeros(dim),
        log_signal_variance=0.0,
        log_noise_variance=float(np.log(0.1)),
    )


def kp_vector(p: KernelParams) -> np.ndarray:
    return np.concatenate([p.log_lengthscales,
                           [p.log_signal_variance, p.log_noise_variance]])


def kp_from_vector(v: np.ndarray) -> KernelParams:
    v = np.asarray(v, dtype=np.float64)
    return KernelParams(log_lengthscales=v[:-2].copy(),
                        log_signal_variance=float(v[-2]),
                        log_noise_variance=float(v[-1]))


def kg_vector(g: KernelGradients) -> np.ndarray:
    return np.concatenate([g.log_lengthscales,
                           [g.log_signal_variance, g.log_noise_variance]])


def _vectors(emb) -> np.ndarray:
    return emb.vectors if isinstance(emb, Embedding) else np.atleast_2d(np.asarray(emb))


def rbf_ard(h1: np.ndarray, h2: np.ndarray, p: KernelParams) -> float:
    """sigma_f^2 * exp(-0.5 * sum_d (h1_d - h2_d)^2 / l_d^2); no noise term."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape or h1.shape != p.log_lengthscales.shape:
        raise DimensionMismatch(
            f"inputs {h1.shape}/{h2.shape} vs lengthscales {p.log_lengthscales.shape}")
    d = (h1 - h2) / p.lengthscales
    return p.signal_variance * float(np.exp(-0.5 * np.dot(d, d)))


def rbf_matrix(emb1, emb2, p: KernelParams) -> np.ndarray:
    """Noise-free cross-covariance between two embedding sets: (T1, T2)."""
    h1, h2 = _vectors(emb1), _vectors(emb2)
    if h1.shape[1] != h2.shape[1] or h1.shape[1] != p.log_lengthscales.shape[0]:
        raise DimensionMismatch("embedding dim does not match lengthscales")
    s1 = h1 / p.lengthscales
    s2 = h2 / p.lengthscales
    d2 = ((s1[:, None, :] - s2[None, :, :]) ** 2).sum(axis=2)
    return p.signal_variance * np.exp(-0.5 * d2)


def kernel_matrix(emb, p: KernelParams) -> SpdMatrix:
    """Full covariance over one series, noise variance on the diagonal."""
    h = _vectors(emb)
    k = rbf_matrix(h, h, p)
    k[np.diag_indices_from(k)] += p.noise_variance
    return SpdMatrix(entries=k)


def kernel_grads(
    emb,
    p: KernelParams,
    upstream: np.ndarray,
    include_noise: bool = True,
) -> tuple[KernelGradients, np.ndarray]:
    """Gradients of sum_{t,t'} upstream[t,t'] * K[t,t'].

    Returns gradients for the log hyperparameters and for every embedding
    vector (shape (T, E)). ``upstream`` must be the symmetric dL/dK over the
    full ordered index grid. ``include_noise=False`` differentiates the
    noise-free matrix instead (used by the latent classification path).
    """
    h = _vectors(emb)
    t_len, e_dim = h.shape
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (t_len, t_len):
        raise DimensionMismatch(f"upstream shape {u.shape} != ({t_len}, {t_len})")
    u = 0.5 * (u + u.T)  # K is symmetric, so only the symmetric part acts

    ell = p.lengthscales
    s = rbf_matrix(h, h, p)  # noise-free kernel values
    w = u * s

    d_sig = float(w.sum())  # dK/d log sigma_f^2 = S
    d_noise = p.noise_variance * float(np.trace(u)) if include_noise else 0.0

    d_ls = np.empty(e_dim)
    scaled = h / ell
    for d in range(e_dim):
        diff2 = (scaled[:, d][:, None] - scaled[:, d][None, :]) ** 2
        d_ls[d] = float((w * diff2).sum())

    # dS/dh_r = -(2 / l^2) * (rowsum(W)_r h_r - (W h)_r), elementwise over dims
    row = w.sum(axis=1)
    d_h = -(2.0 / ell**2) * (row[:, None] * h - w @ h)

    return KernelGradients(log_lengthscales=d_ls,
                           log_signal_variance=d_sig,
                           log_noise_variance=d_noise), d_h
