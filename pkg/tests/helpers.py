"""Shared test utilities: independent oracles and instance builders.

Everything here is deliberately written from first principles (cofactor
expansions, explicit 2x2 algebra, pairwise comparisons, grid quadrature) so
the oracles share no code path with the implementations they check.
"""
from __future__ import annotations

import numpy as np

from dmegp import KernelParams, ModelConfig, PatientSeries, new_model
from dmegp.kernel import kg_vector, kp_from_vector, kp_vector
from dmegp.nn import grad_arrays, net_arrays, replace_net_arrays

REL_DENOM_FLOOR = 1e-8


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_DENOM_FLOOR)


def central_diff(f, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += eps
        xm = x0.copy()
        xm[i] -= eps
        out[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return out


def cofactor_det(a) -> float:
    """Determinant by cofactor expansion along the first row."""
    a = [list(map(float, row)) for row in np.atleast_2d(a)]
    n = len(a)
    if n == 1:
        return a[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in a[1:]]
        total += ((-1.0) ** j) * a[0][j] * cofactor_det(minor)
    return total


def adjugate_inverse(a) -> np.ndarray:
    """Matrix inverse via the adjugate and cofactor determinants."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    det = cofactor_det(a)
    cof = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(a, i, axis=0), j, axis=1)
            cof[i, j] = ((-1.0) ** (i + j)) * (cofactor_det(minor) if n > 1 else 1.0)
    return cof.T / det


def pairwise_auc(labels, scores) -> float:
    """Brute-force AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted half."""
    labels = np.asarray(labels).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def quadrature_sigmoid_gaussian(mean: float, var: float, n_points: int = 10_000) -> float:
    """Grid integration of sigmoid(f) * Normal(f | mean, var)."""
    if var <= 0:
        return float(1.0 / (1.0 + np.exp(-mean)))
    sd = np.sqrt(var)
    f = np.linspace(mean - 10 * sd, mean + 10 * sd, n_points)
    s = 1.0 / (1.0 + np.exp(-f))
    w = np.exp(-0.5 * (f - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return float(np.trapezoid(s * w, f))


# ---------------------------------------------------------------------------
# random instances and parameter flattening for gradient checks
# ---------------------------------------------------------------------------

def random_instance(seed: int, mean_kind: str = "mlp", likelihood: str = "gaussian",
                    max_t: int = 6, max_dim: int = 3):
    """A small seeded model + series pair for derivative checking."""
    rng = np.random.default_rng(seed)
    t_len = int(rng.integers(1 if likelihood == "gaussian" else 2, max_t + 1))
    d = int(rng.integers(1, max_dim + 1))
    cfg = ModelConfig(
        mean_kind=mean_kind,
        likelihood=likelihood,
        embed_dim=int(rng.integers(2, 4)),
        embed_hidden=(int(rng.integers(2, 5)),),
        mean_hidden=(int(rng.integers(2, 5)),),
        n_experts=2 if mean_kind == "mixture" else 1,
    )
    model = new_model(cfg, input_dim=d, seed=seed)
    pid = "p0"
    model.kernels[pid] = KernelParams(
        log_lengthscales=rng.uniform(-0.5, 0.5, cfg.embed_dim),
        log_signal_variance=float(rng.uniform(-0.7, 0.3)),
        log_noise_variance=float(np.log(rng.uniform(0.05, 0.5))),
    )
    if likelihood == "bernoulli":
        targets = (rng.uniform(size=t_len) < 0.5).astype(float)
    else:
        targets = rng.normal(size=t_len)
    series = PatientSeries(id=pid, inputs=rng.normal(size=(t_len, d)), targets=targets)
    return series, model


def flatten_params(model, pid) -> np.ndarray:
    arrs = net_arrays(model.shared) + [kp_vector(model.kernels[pid])]
    return np.concatenate([a.ravel() for a in arrs])


def set_params(model, pid, vec: np.ndarray) -> None:
    arrs = net_arrays(model.shared)
    out, off = [], 0
    for a in arrs:
        out.append(vec[off:off + a.size].reshape(a.shape))
        off += a.size
    model.shared = replace_net_arrays(model.shared, out)
    model.kernels[pid] = kp_from_vector(vec[off:])


def flatten_grads(kgrads, ngrads) -> np.ndarray:
    return np.concatenate([a.ravel() for a in grad_arrays(ngrads)] + [kg_vector(kgrads)])
