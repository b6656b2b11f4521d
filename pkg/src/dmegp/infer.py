"""New-patient adaptation and predictive distributions.

Adapting to a new patient means a fixed number of Adam ascent steps on that
patient's marginal likelihood with the shared networks frozen; only the
patient's kernel hyperparameters move. Predictions then follow exact GP
conditioning for the Gaussian likelihood and the Laplace-approximate latent
for the Bernoulli one. For recurrent embeddings the query is embedded at
the end of the concatenated history so it conditions on everything seen so
far; per-step (mlp) embeddings are unaffected by ordering.

Predictive variances are reported in observation space (noise included); the
latent-function quantities are retained on every result for diagnostics.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import laplace
from .errors import NumericError
from .kernel import (KernelParams, default_kernel_params, kernel_matrix,
                     kg_vector, kp_from_vector, kp_vector, rbf_matrix)
from .linalg import DEFAULT_JITTER, chol_solve, cholesky
from .model import DmeGpModel, PatientSeries, mean_values, _patient_grads_impl
from .nn import embed_series
from .optim import AdamState, adam_step

__all__ = [
    "AdaptationConfig",
    "PredictiveDistribution",
    "initial_theta",
    "adapt_new_patient",
    "adapt_p_gps_patient",
    "predict_regression",
    "sequential_forecast",
    "predict_classification",
]

VARIANCE_FLOOR = -1e-10  # negatives above this are clamped to zero


@dataclass(frozen=True)
class AdaptationConfig:
    steps: int = 50
    step_size: float = 0.05
    init: str = "cohort-mean"  # or "kernel-defaults"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("adaptation step count must be >= 0")
        if self.init not in ("cohort-mean", "kernel-defaults"):
            raise ValueError(f"unknown theta initialization policy {self.init!r}")


@dataclass(frozen=True)
class PredictiveDistribution:
    """One predictive marginal; regression fills mean/variance, classification
    fills class_probability. Latent quantities always populated."""

    mean: float
    variance: float
    latent_mean: float
    latent_variance: float
    class_probability: float | None = None
    warning: bool = False


def initial_theta(model: DmeGpModel, policy: str = "cohort-mean") -> KernelParams:
    """Starting kernel parameters for a new patient.

    "cohort-mean" averages the trained per-patient log parameters
    element-wise (for shared-kernel modes this is just the shared entry);
    "kernel-defaults" ignores training entirely.
    """
    if policy == "kernel-defaults" or not model.kernels:
        return default_kernel_params(model.config.embed_dim)
    stack = np.stack([kp_vector(kp) for kp in model.kernels.values()])
    return kp_from_vector(stack.mean(axis=0))


def adapt_new_patient(
    history: PatientSeries | None, model: DmeGpModel, cfg: AdaptationConfig
) -> KernelParams:
    """Adam ascent on the history's marginal likelihood, networks frozen.

    An empty history (None) returns the initialization untouched. If the
    objective becomes numerically infeasible mid-way the last valid
    parameters are returned and a warning is emitted.
    """
    theta = initial_theta(model, cfg.init)
    if history is None or cfg.steps == 0:
        return theta
    probe = DmeGpModel(config=model.config, shared=model.shared,
                       kernels=dict(model.kernels), embeddings=model.embeddings,
                       init_seed=model.init_seed)
    key = probe.kernel_key(history.id)
    state = AdamState.for_arrays([kp_vector(theta)], step_size=cfg.step_size)
    for _ in range(cfg.steps):
        probe.kernels[key] = theta
        try:
            kgrads, _, _ = _patient_grads_impl(history, probe, with_network=False)
        except NumericError as exc:
            warnings.warn(f"adaptation stopped early ({exc}); keeping last valid parameters")
            return theta
        (vec,), state = adam_step(state, [kp_vector(theta)], [kg_vector(kgrads)])
        theta = kp_from_vector(vec)
    return theta


def adapt_p_gps_patient(
    history: PatientSeries, model: DmeGpModel, cfg: AdaptationConfig
):
    """Fit a private embedding net and kernel params on one patient's data.

    This is the new-patient protocol for the nothing-shared ablation mode:
    there are no global parameters to freeze, so everything patient-local
    (the private embedding net and the kernel hyperparameters) trains on the
    history. Returns (network, kernel_params) without touching the model.
    """
    from .nn import grad_arrays, net_arrays, replace_net_arrays

    probe = DmeGpModel(config=model.config, shared=model.shared,
                       kernels=dict(model.kernels),
                       embeddings=dict(model.embeddings), init_seed=model.init_seed)
    probe.ensure_patient(history.id)
    theta = initial_theta(model, cfg.init)
    net = probe.embeddings[history.id]
    st_net = AdamState.for_arrays(net_arrays(net), step_size=cfg.step_size)
    st_kp = AdamState.for_arrays([kp_vector(theta)], step_size=cfg.step_size)
    for _ in range(cfg.steps):
        probe.kernels[history.id] = theta
        probe.embeddings[history.id] = net
        try:
            kgrads, ngrads, _ = _patient_grads_impl(history, probe, with_network=True)
        except NumericError as exc:
            warnings.warn(f"patient-local adaptation stopped early ({exc})")
            break
        new_arrays, st_net = adam_step(st_net, net_arrays(net), grad_arrays(ngrads))
        net = replace_net_arrays(net, new_arrays)
        (vec,), st_kp = adam_step(st_kp, [kp_vector(theta)], [kg_vector(kgrads)])
        theta = kp_from_vector(vec)
    return net, theta


# ---------------------------------------------------------------------------
# prediction helpers
# ---------------------------------------------------------------------------

def _joint_embed(history: PatientSeries | None, query_input: np.ndarray,
                 model: DmeGpModel, patient_id: str):
    net = model.network_for(patient_id)
    q = np.atleast_1d(np.asarray(query_input, dtype=np.float64))
    if history is None:
        x = q[None, :]
    else:
        x = np.vstack([history.inputs, q[None, :]])
    emb = embed_series(x, net)
    mu_all = mean_values(emb, net, model.config)
    return emb.vectors[:-1], emb.vectors[-1], mu_all[:-1], float(mu_all[-1])


def _clamped_variance(value: float) -> float:
    if value < VARIANCE_FLOOR:
        raise NumericError(f"predictive variance {value:g} is significantly negative")
    return max(value, 0.0)


def predict_regression(
    history: PatientSeries | None,
    query_input: np.ndarray,
    theta: KernelParams,
    model: DmeGpModel,
) -> PredictiveDistribution:
    """Exact GP predictive distribution of the next observation.

    mean = mu(h*) + k*' K^{-1} (y - mu(H)); the latent variance is
    k(h*, h*) - k*' K^{-1} k* and the reported variance adds the noise
    variance on top (it predicts the observation, not the latent value).
    """
    pid = history.id if history is not None else "__new__"
    h_hist, h_query, mu_hist, mu_query = _joint_embed(history, query_input, model, pid)
    prior_var = theta.signal_variance
    if history is None or h_hist.shape[0] == 0:
        lat_var = _clamped_variance(prior_var)
        return PredictiveDistribution(
            mean=mu_query, variance=lat_var + theta.noise_variance,
            latent_mean=mu_query, latent_variance=lat_var)
    k = kernel_matrix(h_hist, theta)
    fac = cholesky(k, DEFAULT_JITTER)
    resid = history.targets - mu_hist
    alpha = chol_solve(fac, resid)
    k_star = rbf_matrix(h_hist, h_query[None, :], theta)[:, 0]
    mean = float(mu_query + k_star @ alpha)
    lat_var = _clamped_variance(prior_var - float(k_star @ chol_solve(fac, k_star)))
    return PredictiveDistribution(
        mean=mean, variance=lat_var + theta.noise_variance,
        latent_mean=mean, latent_variance=lat_var)


def sequential_forecast(
    series: PatientSeries, theta: KernelParams, model: DmeGpModel
) -> list[PredictiveDistribution]:
    """Predict y_t for every t conditioning only on steps before t.

    The first step has no evidence and falls back to the mean function. The
    whole series is embedded once; recurrent embeddings are causal, so the
    step-t slice equals what embedding the prefix alone would give.
    """
    net = model.network_for(series.id)
    emb = embed_series(series.inputs, net)
    mu = mean_values(emb, net, model.config)
    h = emb.vectors
    out: list[PredictiveDistribution] = []
    prior_var = theta.signal_variance
    for t in range(series.length):
        if t == 0:
            lat_var = _clamped_variance(prior_var)
            out.append(PredictiveDistribution(
                mean=float(mu[0]), variance=lat_var + theta.noise_variance,
                latent_mean=float(mu[0]), latent_variance=lat_var))
            continue
        k = kernel_matrix(h[:t], theta)
        fac = cholesky(k, DEFAULT_JITTER)
        alpha = chol_solve(fac, series.targets[:t] - mu[:t])
        k_star = rbf_matrix(h[:t], h[t][None, :], theta)[:, 0]
        mean = float(mu[t] + k_star @ alpha)
        lat_var = _clamped_variance(
            prior_var - float(k_star @ chol_solve(fac, k_star)))
        out.append(PredictiveDistribution(
            mean=mean, variance=lat_var + theta.noise_variance,
            latent_mean=mean, latent_variance=lat_var))
    return out


def predict_classification(
    history: PatientSeries | None,
    query_input: np.ndarray,
    theta: KernelParams,
    model: DmeGpModel,
    max_newton_iters: int = laplace.MAX_NEWTON_ITERS,
) -> PredictiveDistribution:
    """Class probability via the Laplace latent posterior.

    The latent prior is the noise-free kernel on the embeddings; the
    posterior mode is found by damped Newton and the predictive probability
    applies the probit-style closed form to the latent mean and variance.
    If the mode search diverges the prior latent is used instead and the
    result carries a warning flag.
    """
    pid = history.id if history is not None else "__new__"
    h_hist, h_query, mu_hist, mu_query = _joint_embed(history, query_input, model, pid)
    prior_var = theta.signal_variance
    if history is None or h_hist.shape[0] == 0:
        prob = laplace.probit_probability(mu_query, prior_var)
        return PredictiveDistribution(
            mean=mu_query, variance=prior_var, latent_mean=mu_query,
            latent_variance=prior_var, class_probability=prob)
    k_latent = rbf_matrix(h_hist, h_hist, theta)
    warned = False
    try:
        post = laplace.fit_laplace(k_latent, mu_hist, history.targets,
                                   laplace.BERNOULLI, max_iters=max_newton_iters)
        k_star = rbf_matrix(h_hist, h_query[None, :], theta)[:, 0]
        lat_mean, lat_var = laplace.latent_predict(post, k_star, prior_var, mu_query)
    except NumericError as exc:
        warnings.warn(f"latent mode search failed ({exc}); falling back to the prior latent")
        lat_mean, lat_var, warned = mu_query, prior_var, True
    prob = laplace.probit_probability(lat_mean, lat_var)
    return PredictiveDistribution(
        mean=lat_mean, variance=lat_var, latent_mean=lat_mean,
        latent_variance=lat_var, class_probability=prob, warning=warned)
