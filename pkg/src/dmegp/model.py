"""Per-patient marginal likelihood and gradients, plus joint-GP references.

The core model keeps one exact GP per patient: the mean comes from the
shared deep mean function evaluated on shared deep embeddings, the
covariance from the per-patient RBF kernel on those embeddings. The joint
distribution over a cohort is block-diagonal, so the cohort objective is a
plain sum of per-patient terms and costs O(P T^3).

Two reference models are included for cross-checking and as scaling foils:
the all-GP mixed model whose joint covariance couples every pair of
patients through a global kernel, and the multi-task construction that
scales a global kernel by a task-relatedness matrix. Both operate on raw
inputs with zero mean, are capped at 200 total observations, and are
written as deliberately plain from-the-definition code (entry-wise
covariance assembly, textbook factorization) so their full joint cost is
what you measure when you time them.

Sharing modes:
  dme-gp      shared mean + embedding, per-patient kernel params
  p-gps       zero mean, per-patient embedding and kernel params
  p-gps-cov   zero mean, shared embedding, one shared kernel params
  p-gps-both  shared mean + embedding, one shared kernel params
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import laplace
from .errors import ConfigError, DataError, DimensionMismatch, InstanceTooLarge, NotPositiveDefinite
from .kernel import (KernelGradients, KernelParams, default_kernel_params,
                     kernel_grads, kernel_matrix, rbf_ard, rbf_matrix)
from .linalg import DEFAULT_JITTER, SpdMatrix, chol_solve, cholesky, log_det
from .nn import (Architecture, Embedding, NetworkGradients, NetworkParams,
                 backprop_series, embed_series, init_network, mean_series,
                 mixture_mean_series, zeros_like_grads)

__all__ = [
    "PatientSeries",
    "ModelConfig",
    "DmeGpModel",
    "SHARED_KERNEL_KEY",
    "new_model",
    "patient_log_marginal",
    "patient_objective",
    "patient_grads",
    "cohort_log_marginal",
    "megp_joint_log_marginal",
    "mtgp_joint_log_marginal",
]

SHARING_MODES = ("dme-gp", "p-gps", "p-gps-cov", "p-gps-both")
LIKELIHOODS = ("gaussian", "bernoulli")
MEAN_KINDS = ("mlp", "rnn", "mixture")
SHARED_KERNEL_KEY = "__shared__"
JOINT_SIZE_CAP = 200


@dataclass(frozen=True)
class PatientSeries:
    """One patient's ordered series: (T, D) inputs and (T,) targets.

    NaN entries in ``inputs`` are permitted as missing-value markers between
    CSV loading and normalization; the model layer rejects them.
    """

    id: str
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets, dtype=np.float64).ravel()
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        if x.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"patient {self.id!r}: {x.shape[0]} inputs vs {y.shape[0]} targets")
        if x.shape[0] < 1:
            raise DimensionMismatch(f"patient {self.id!r}: series must have T >= 1")
        if not np.all(np.isfinite(y)):
            raise DataError(f"patient {self.id!r}: non-finite target values")

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class ModelConfig:
    sharing: str = "dme-gp"
    likelihood: str = "gaussian"
    mean_kind: str = "mlp"
    embed_dim: int = 8
    embed_hidden: tuple[int, ...] = (8,)
    mean_hidden: tuple[int, ...] = (8,)
    n_experts: int = 1
    gate_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.mean_kind not in MEAN_KINDS:
            raise ConfigError(f"unknown mean kind {self.mean_kind!r}")
        if self.mean_kind == "mixture" and self.n_experts < 1:
            raise ConfigError("mixture mean needs n_experts >= 1")

    @property
    def zero_mean(self) -> bool:
        return self.sharing in ("p-gps", "p-gps-cov")

    @property
    def shared_theta(self) -> bool:
        return self.sharing in ("p-gps-cov", "p-gps-both")

    @property
    def per_patient_embedding(self) -> bool:
        return self.sharing == "p-gps"

    def architecture(self, input_dim: int) -> Architecture:
        return Architecture(
            input_dim=input_dim,
            embed_dim=self.embed_dim,
            cell="rnn" if self.mean_kind == "rnn" else "mlp",
            embed_hidden=self.embed_hidden,
            mean_hidden=self.mean_hidden,
            n_experts=self.n_experts if self.mean_kind == "mixture" else 1,
            gate_hidden=self.gate_hidden,
        )


@dataclass
class DmeGpModel:
    """Shared network weights plus the per-patient kernel parameter map."""

    config: ModelConfig
    shared: NetworkParams
    kernels: dict[str, KernelParams] = field(default_factory=dict)
    embeddings: dict[str, NetworkParams] = field(default_factory=dict)  # p-gps only
    init_seed: int = 0

    def kernel_key(self, patient_id: str) -> str:
        return SHARED_KERNEL_KEY if self.config.shared_theta else patient_id

    def kernel_for(self, patient_id: str) -> KernelParams:
        key = self.kernel_key(patient_id)
        kp = self.kernels.get(key)
        return kp if kp is not None else default_kernel_params(self.config.embed_dim)

    def network_for(self, patient_id: str) -> NetworkParams:
        if not self.config.per_patient_embedding:
            return self.shared
        net = self.embeddings.get(patient_id)
        return net if net is not None else self.fresh_patient_network(patient_id)

    def fresh_patient_network(self, patient_id: str) -> NetworkParams:
        """Deterministic patient-local network (p-gps mode)."""
        stream = zlib.crc32(patient_id.encode("utf-8"))
        rng = np.random.default_rng(np.random.SeedSequence([self.init_seed, stream]))
        return init_network(self.shared.arch, rng)

    def ensure_patient(self, patient_id: str) -> None:
        """Create kernel (and p-gps embedding) entries on first sight."""
        key = self.kernel_key(patient_id)
        if key not in self.kernels:
            self.kernels[key] = default_kernel_params(self.config.embed_dim)
        if self.config.per_patient_embedding and patient_id not in self.embeddings:
            self.embeddings[patient_id] = self.fresh_patient_network(patient_id)


def new_model(config: ModelConfig, input_dim: int, seed: int = 0) -> DmeGpModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5ead]))
    shared = init_network(config.architecture(input_dim), rng)
    kernels = {}
    if config.shared_theta:
        kernels[SHARED_KERNEL_KEY] = default_kernel_params(config.embed_dim)
    return DmeGpModel(config=config, shared=shared, kernels=kernels, init_seed=seed)


# ---------------------------------------------------------------------------
# per-patient forward / likelihood / gradients
# ---------------------------------------------------------------------------

def mean_values(emb: Embedding, net: NetworkParams, config: ModelConfig) -> np.ndarray:
    if config.zero_mean:
        return np.zeros(emb.length)
    if config.mean_kind == "mixture":
        return mixture_mean_series(emb, net)
    return mean_series(emb, net)


def _check_inputs(series: PatientSeries) -> None:
    if not np.all(np.isfinite(series.inputs)):
        raise DataError(
            f"patient {series.id!r}: non-finite input values (normalize first?)")


def _forward(series: PatientSeries, model: DmeGpModel):
    _check_inputs(series)
    net = model.network_for(series.id)
    theta = model.kernel_for(series.id)
    emb = embed_series(series.inputs, net)
    mu = mean_values(emb, net, model.config)
    return net, theta, emb, mu


def patient_log_marginal(series: PatientSeries, model: DmeGpModel) -> float:
    """Exact Gaussian log marginal likelihood of one patient's series.

    -1/2 (y-mu)' K^{-1} (y-mu) - 1/2 log|K| - T/2 log(2 pi), with K the
    noise-inclusive covariance on the patient's embeddings.
    """
    if model.config.likelihood != "gaussian":
        raise ConfigError("patient_log_marginal is the gaussian-likelihood path")
    _, theta, emb, mu = _forward(series, model)
    k = kernel_matrix(emb, theta)
    fac = cholesky(k, DEFAULT_JITTER)
    resid = series.targets - mu
    alpha = chol_solve(fac, resid)
    t_len = series.length
    return float(-0.5 * resid @ alpha - 0.5 * log_det(fac)
                 - 0.5 * t_len * math.log(2.0 * math.pi))


def patient_objective(series: PatientSeries, model: DmeGpModel) -> float:
    """Training objective for either likelihood.

    Gaussian: the exact log marginal. Bernoulli: the Laplace-approximate
    log marginal of the latent GP squashed through a sigmoid.
    """
    if model.config.likelihood == "gaussian":
        return patient_log_marginal(series, model)
    _, theta, emb, mu = _forward(series, model)
    k_latent = rbf_matrix(emb, emb, theta)
    post = laplace.fit_laplace(k_latent, mu, series.targets, laplace.BERNOULLI)
    return laplace.log_marginal(post)


def patient_grads(
    series: PatientSeries, model: DmeGpModel
) -> tuple[KernelGradients, NetworkGradients]:
    """Exact gradients of the patient objective w.r.t. theta and the nets."""
    kg, ng, _ = _patient_grads_impl(series, model, with_network=True)
    return kg, ng


def _patient_grads_impl(series: PatientSeries, model: DmeGpModel, with_network: bool):
    """Gradients plus the objective value; network part optional for speed."""
    net, theta, emb, mu = _forward(series, model)
    y = series.targets
    t_len = series.length

    if model.config.likelihood == "gaussian":
        k = kernel_matrix(emb, theta)
        fac = cholesky(k, DEFAULT_JITTER)
        resid = y - mu
        alpha = chol_solve(fac, resid)
        value = float(-0.5 * resid @ alpha - 0.5 * log_det(fac)
                      - 0.5 * t_len * math.log(2.0 * math.pi))
        k_inv = chol_solve(fac, np.eye(t_len))
        d_k = 0.5 * (np.outer(alpha, alpha) - k_inv)
        d_mu = alpha
        include_noise = True
    else:
        k_latent = rbf_matrix(emb, emb, theta)
        post = laplace.fit_laplace(k_latent, mu, y, laplace.BERNOULLI)
        value = laplace.log_marginal(post)
        d_k, d_mu = laplace.marginal_grads(post)
        include_noise = False

    kgrads, d_h = kernel_grads(emb, theta, d_k, include_noise=include_noise)
    if not with_network:
        return kgrads, None, value
    upstream_mean = d_mu if not model.config.zero_mean else np.zeros(t_len)
    ngrads = backprop_series(emb, upstream_mean, d_h, net)
    return kgrads, ngrads, value


def cohort_log_marginal(cohort: list[PatientSeries], model: DmeGpModel) -> float:
    """Sum of per-patient objectives; block-diagonal structure makes the
    joint density decompose additively across patients."""
    return float(sum(patient_objective(s, model) for s in cohort))


# ---------------------------------------------------------------------------
# joint-GP reference models (desk scale)
# ---------------------------------------------------------------------------

def _cap_joint_size(cohort: list[PatientSeries]) -> int:
    total = sum(s.length for s in cohort)
    if total > JOINT_SIZE_CAP:
        raise InstanceTooLarge(
            f"joint reference model capped at {JOINT_SIZE_CAP} observations, got {total}")
    return total


def _ref_cholesky(a: list[list[float]]) -> list[list[float]]:
    """Textbook lower Cholesky on plain lists; raises NotPositiveDefinite."""
    n = len(a)
    low = [[0.0] * n for _ in range(n)]
    for i in range(n):
        row_i = low[i]
        for j in range(i + 1):
            row_j = low[j]
            s = a[i][j]
            for k in range(j):
                s -= row_i[k] * row_j[k]
            if i == j:
                if s <= 0.0:
                    raise NotPositiveDefinite(
                        f"reference factorization failed at pivot {i}")
                row_i[j] = math.sqrt(s)
            else:
                row_i[j] = s / row_j[j]
    return low


def _ref_gaussian_logdensity(cov: list[list[float]], y: np.ndarray) -> float:
    """Zero-mean Gaussian log density via the textbook factorization."""
    n = len(cov)
    low = _ref_cholesky(cov)
    # forward substitution L z = y
    z = [0.0] * n
    for i in range(n):
        s = float(y[i])
        row = low[i]
        for k in range(i):
            s -= row[k] * z[k]
        z[i] = s / row[i]
    quad = sum(v * v for v in z)
    logdet = 2.0 * sum(math.log(low[i][i]) for i in range(n))
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)


def megp_joint_log_marginal(
    cohort: list[PatientSeries],
    global_kernel: KernelParams,
    per_patient: dict[str, KernelParams],
) -> float:
    """Joint log marginal of the all-GP mixed model over raw inputs.

    The joint covariance couples every pair of observations through the
    global kernel and adds each patient's own kernel (noise included) on the
    diagonal blocks, so the matrix is dense over all sum(T_i) points and the
    cost grows with the cube of that total. Zero mean throughout; the
    global kernel's noise parameter plays no role (noise enters through the
    per-patient kernels).
    """
    _cap_joint_size(cohort)
    points = [(s, t) for s in cohort for t in range(s.length)]
    n = len(points)
    cov = [[0.0] * n for _ in range(n)]
    for a in range(n):
        s_a, t_a = points[a]
        x_a = s_a.inputs[t_a]
        theta_a = per_patient[s_a.id]
        for b in range(a, n):
            s_b, t_b = points[b]
            v = rbf_ard(x_a, s_b.inputs[t_b], global_kernel)
            if s_a.id == s_b.id:
                v += rbf_ard(x_a, s_b.inputs[t_b], theta_a)
                if t_a == t_b:
                    v += theta_a.noise_variance
            cov[a][b] = v
            cov[b][a] = v
    y = np.concatenate([s.targets for s in cohort])
    return _ref_gaussian_logdensity(cov, y)


def mtgp_joint_log_marginal(
    cohort: list[PatientSeries],
    task_matrix: np.ndarray,
    global_kernel: KernelParams,
) -> float:
    """Joint log marginal of the multi-task construction over raw inputs.

    Covariance element between observation t of patient i and t' of patient
    j is task_matrix[i, j] * k_g(x, x'), plus the global kernel's noise
    variance on the diagonal. Same desk-scale cap and reference solver as
    the mixed-model variant.
    """
    _cap_joint_size(cohort)
    tm = np.asarray(task_matrix, dtype=np.float64)
    p = len(cohort)
    if tm.shape != (p, p):
        raise DimensionMismatch(f"task matrix shape {tm.shape} != ({p}, {p})")
    if not np.allclose(tm, tm.T, rtol=0.0, atol=1e-12):
        raise DimensionMismatch("task matrix must be symmetric")
    points = [(i, t) for i, s in enumerate(cohort) for t in range(s.length)]
    n = len(points)
    noise = global_kernel.noise_variance
    cov = [[0.0] * n for _ in range(n)]
    for a in range(n):
        i_a, t_a = points[a]
        x_a = cohort[i_a].inputs[t_a]
        for b in range(a, n):
            i_b, t_b = points[b]
            v = tm[i_a, i_b] * rbf_ard(x_a, cohort[i_b].inputs[t_b], global_kernel)
            if a == b:
                v += noise
            cov[a][b] = v
            cov[b][a] = v
    y = np.concatenate([s.targets for s in cohort])
    return _ref_gaussian_logdensity(cov, y)
