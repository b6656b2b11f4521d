"""Laplace approximation for the latent GP under non-Gaussian likelihoods.

The latent function f has prior N(m, K) with K the noise-free covariance on
the embeddings; the observation model is a per-point likelihood (Bernoulli
through a sigmoid for classification, or Gaussian, which is used to check
that this path collapses to exact GP regression). The posterior mode is
found by damped Newton iterations in the numerically stable B = I +
sqrt(W) K sqrt(W) parameterization, which never inverts K itself.

Besides the approximate log marginal, this module supplies its exact
gradients with respect to K and m, including the implicit dependence of the
mode on both, so the same chain rule used for the Gaussian objective trains
classification models too.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NewtonDivergence

__all__ = [
    "Likelihood",
    "BERNOULLI",
    "gaussian_likelihood",
    "LaplacePosterior",
    "fit_laplace",
    "log_marginal",
    "marginal_grads",
    "latent_predict",
    "sigmoid",
    "probit_probability",
]

MAX_NEWTON_ITERS = 60
NEWTON_TOL = 1e-10


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class Likelihood:
    """Pointwise log-likelihood and its first three derivatives in f."""

    log_prob: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    neg_hess: Callable[[np.ndarray, np.ndarray], np.ndarray]  # W = -d2/df2 >= 0
    third: Callable[[np.ndarray, np.ndarray], np.ndarray]  # d3/df3


def _bern_log_prob(y, f):
    # y f - log(1 + e^f), computed stably
    return y * f - np.logaddexp(0.0, f)


BERNOULLI = Likelihood(
    log_prob=_bern_log_prob,
    grad=lambda y, f: y - sigmoid(f),
    neg_hess=lambda y, f: sigmoid(f) * (1.0 - sigmoid(f)),
    third=lambda y, f: -sigmoid(f) * (1.0 - sigmoid(f)) * (1.0 - 2.0 * sigmoid(f)),
)


def gaussian_likelihood(noise_variance: float) -> Likelihood:
    """N(y | f, noise_variance) as a Likelihood; Newton converges in one step."""
    nv = float(noise_variance)
    return Likelihood(
        log_prob=lambda y, f: -0.5 * (y - f) ** 2 / nv - 0.5 * np.log(2.0 * np.pi * nv),
        grad=lambda y, f: (y - f) / nv,
        neg_hess=lambda y, f: np.full_like(np.asarray(f, dtype=np.float64), 1.0 / nv),
        third=lambda y, f: np.zeros_like(np.asarray(f, dtype=np.float64)),
    )


@dataclass
class LaplacePosterior:
    """Mode and curvature of the latent posterior, plus cached factors."""

    k: np.ndarray  # latent prior covariance (n, n)
    m: np.ndarray  # latent prior mean (n,)
    y: np.ndarray  # observations (n,)
    likelihood: Likelihood
    f_hat: np.ndarray  # posterior mode (n,)
    a: np.ndarray  # K^{-1} (f_hat - m) == grad log p(y | f_hat)
    w: np.ndarray  # -diag hessian of log lik at the mode
    chol_b: np.ndarray  # lower Cholesky of B = I + sqrt(W) K sqrt(W)
    iterations: int


def _objective(k, m, y, lik, f, a):
    return float(np.sum(lik.log_prob(y, f)) - 0.5 * (f - m) @ a)


def fit_laplace(
    k: np.ndarray,
    m: np.ndarray,
    y: np.ndarray,
    likelihood: Likelihood = BERNOULLI,
    max_iters: int = MAX_NEWTON_ITERS,
    tol: float = NEWTON_TOL,
) -> LaplacePosterior:
    """Damped Newton search for the latent posterior mode.

    Each iteration solves the regularized system through B = I +
    sqrt(W) K sqrt(W); if the full step lowers the (penalized) objective the
    step is halved up to a fixed number of times. Raises NewtonDivergence
    when the objective change has not dropped below ``tol`` within
    ``max_iters``.
    """
    k = np.asarray(k, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.shape[0]
    f = m.copy()
    a = np.zeros(n)
    obj = _objective(k, m, y, likelihood, f, a)
    chol_b = np.linalg.cholesky(np.eye(n))
    w = likelihood.neg_hess(y, f)

    for it in range(1, max_iters + 1):
        w = likelihood.neg_hess(y, f)
        sw = np.sqrt(w)
        b = np.eye(n) + sw[:, None] * k * sw[None, :]
        chol_b = np.linalg.cholesky(b)
        grad = likelihood.grad(y, f)
        rhs = w * (f - m) + grad
        v = solve_triangular(chol_b, sw * (k @ rhs), lower=True)
        a_new = rhs - sw * solve_triangular(chol_b.T, v, lower=False)

        step = 1.0
        for _ in range(30):
            a_try = a + step * (a_new - a)
            f_try = m + k @ a_try
            obj_try = _objective(k, m, y, likelihood, f_try, a_try)
            if obj_try >= obj - 1e-12:
                break
            step *= 0.5
        a, f, prev = a_try, f_try, obj
        obj = obj_try
        if abs(obj - prev) < tol:
            w = likelihood.neg_hess(y, f)
            sw = np.sqrt(w)
            chol_b = np.linalg.cholesky(np.eye(n) + sw[:, None] * k * sw[None, :])
            return LaplacePosterior(k=k, m=m, y=y, likelihood=likelihood, f_hat=f,
                                    a=a, w=w, chol_b=chol_b, iterations=it)
    raise NewtonDivergence(f"mode search did not converge in {max_iters} iterations")


def log_marginal(post: LaplacePosterior) -> float:
    """Approximate log p(y): likelihood at the mode, prior quadratic term,
    and the -1/2 log|B| curvature correction."""
    fit = float(np.sum(post.likelihood.log_prob(post.y, post.f_hat)))
    quad = 0.5 * float((post.f_hat - post.m) @ post.a)
    half_logdet_b = float(np.sum(np.log(np.diag(post.chol_b))))
    return fit - quad - half_logdet_b


def marginal_grads(post: LaplacePosterior) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the approximate log marginal w.r.t. K and m.

    Both the explicit dependence and the implicit shift of the posterior
    mode are included; the returned dK is symmetric and is exactly the
    upstream matrix the kernel chain rule expects.
    """
    k, w, a = post.k, post.w, post.a
    n = k.shape[0]
    sw = np.sqrt(w)
    # R = (K + W^{-1})^{-1} = sqrt(W) B^{-1} sqrt(W)
    b_inv = solve_triangular(
        post.chol_b.T, solve_triangular(post.chol_b, np.eye(n), lower=True), lower=False)
    r = sw[:, None] * b_inv * sw[None, :]
    dk_explicit = 0.5 * (np.outer(a, a) - r)
    # posterior covariance diag: C = K - K R K
    c = k - k @ r @ k
    s2 = 0.5 * np.diag(c) * post.likelihood.third(post.y, post.f_hat)
    # implicit terms through the mode: df = (I + K W)^{-1} (dm + dK a)
    rvec = np.linalg.solve(np.eye(n) + w[:, None] * k, s2)
    d_m = a + rvec
    d_k = dk_explicit + 0.5 * (np.outer(rvec, a) + np.outer(a, rvec))
    return d_k, d_m


def latent_predict(
    post: LaplacePosterior, k_star: np.ndarray, k_ss: float, m_star: float
) -> tuple[float, float]:
    """Latent predictive mean and variance at one query point."""
    mean = float(m_star + k_star @ post.a)
    v = solve_triangular(post.chol_b, np.sqrt(post.w) * k_star, lower=True)
    var = float(k_ss - v @ v)
    return mean, max(var, 0.0)


def probit_probability(latent_mean: float, latent_var: float) -> float:
    """Closed-form squashing of a Gaussian latent through the sigmoid:
    sigmoid(mean / sqrt(1 + pi * var / 8))."""
    return float(sigmoid(latent_mean / np.sqrt(1.0 + np.pi * latent_var / 8.0)))
