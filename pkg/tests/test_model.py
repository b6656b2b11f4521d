import numpy as np
import pytest
from scipy.stats import multivariate_normal

from dmegp import (InstanceTooLarge, KernelParams, ModelConfig, PatientSeries,
                   cohort_log_marginal, megp_joint_log_marginal,
                   mtgp_joint_log_marginal, new_model, patient_grads,
                   patient_log_marginal)
from dmegp.kernel import rbf_ard
from dmegp.nn import Mlp, NetworkParams, Architecture
from dmegp.model import DmeGpModel
from helpers import (adjugate_inverse, central_diff, cofactor_det, flatten_grads,
                     flatten_params, random_instance, rel_err, set_params)

LOG2PI = np.log(2.0 * np.pi)
NEG_INF_SIGNAL = -60.0  # exp(-60) ~ 9e-27: numerically a zero signal variance


def identity_model(input_dim: int, sharing: str = "dme-gp", zero_mean_weights=True):
    """Model whose embedding is the identity map and whose mean net is zero."""
    cfg = ModelConfig(sharing=sharing, embed_dim=input_dim, embed_hidden=(),
                      mean_hidden=())
    model = new_model(cfg, input_dim=input_dim, seed=0)
    arch = Architecture(input_dim=input_dim, embed_dim=input_dim, cell="mlp",
                        embed_hidden=(), mean_hidden=())
    embed = Mlp(weights=[np.eye(input_dim)], biases=[np.zeros(input_dim)])
    mean = Mlp(weights=[np.zeros((1, input_dim))], biases=[np.zeros(1)])
    model.shared = NetworkParams(arch=arch, embed_rnn=None, embed_mlp=embed,
                                 means=[mean])
    return model


def fixed_kernel_model(t1_kernel: KernelParams, pid="p", input_dim=1):
    model = identity_model(input_dim)
    model.kernels[pid] = t1_kernel
    return model


def kp(ls, sig, noise):
    return KernelParams(log_lengthscales=np.asarray(ls, dtype=float),
                        log_signal_variance=float(sig), log_noise_variance=float(noise))


def test_log_marginal_standard_normal():
    # T=1, mu=0, K=[[1]]: sigma_f^2 + sigma_n^2 = 1 via tiny noise
    model = fixed_kernel_model(kp([0.0], 0.0, -60.0))
    s = PatientSeries(id="p", inputs=np.zeros((1, 1)), targets=[0.0])
    assert patient_log_marginal(s, model) == pytest.approx(-0.5 * LOG2PI, abs=1e-9)


def test_log_marginal_zero_residual():
    # mean 2 via bias, y = 2: same value as the standard normal at its mode
    model = fixed_kernel_model(kp([0.0], 0.0, -60.0))
    model.shared.means[0].biases[0][0] = 2.0
    s = PatientSeries(id="p", inputs=np.zeros((1, 1)), targets=[2.0])
    assert patient_log_marginal(s, model) == pytest.approx(-0.5 * LOG2PI, abs=1e-9)


def test_log_marginal_2x2_explicit():
    # K = 2I via sigma_f^2 ~ 0 wouldn't be PSD-stable; use distant inputs and
    # noise to realize an effectively diagonal covariance of 2.
    model = fixed_kernel_model(kp([np.log(1e-3)], NEG_INF_SIGNAL, np.log(2.0)))
    s = PatientSeries(id="p", inputs=np.array([[0.0], [1.0]]), targets=[1.0, 1.0])
    want = -0.5 * 1.0 - 0.5 * np.log(4.0) - LOG2PI
    assert patient_log_marginal(s, model) == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(-3.031024, abs=1e-6)


def test_log_marginal_matches_dense_inverse_oracle():
    # independent oracle: adjugate inverse + cofactor determinant
    for seed in range(6):
        series, model = random_instance(seed, mean_kind="mlp", max_t=5)
        from dmegp.nn import embed_series, mean_series
        from dmegp.kernel import kernel_matrix
        emb = embed_series(series.inputs, model.shared)
        mu = mean_series(emb, model.shared)
        k = kernel_matrix(emb, model.kernels[series.id]).entries
        r = series.targets - mu
        want = (-0.5 * r @ adjugate_inverse(k) @ r
                - 0.5 * np.log(cofactor_det(k))
                - 0.5 * series.length * LOG2PI)
        assert patient_log_marginal(series, model) == pytest.approx(want, abs=1e-8)


def test_grads_zero_residual_zero_mean_gradient():
    series, model = random_instance(3, mean_kind="mlp")
    from dmegp.nn import embed_series, mean_series
    emb = embed_series(series.inputs, model.shared)
    mu = mean_series(emb, model.shared)
    series = PatientSeries(id=series.id, inputs=series.inputs, targets=mu)
    _, ngrads = patient_grads(series, model)
    for arr in ngrads.means[0].weights + ngrads.means[0].biases:
        assert np.allclose(arr, 0.0, atol=1e-12)


def test_grads_t1_noise_identity():
    # d logL / d log sigma_n^2 = 0.5 sigma_n^2 ((y-mu)^2 / k^2 - 1/k)
    theta = kp([0.0], np.log(1.5), np.log(0.5))
    model = fixed_kernel_model(theta)
    y, mu = 1.3, 0.0
    s = PatientSeries(id="p", inputs=np.zeros((1, 1)), targets=[y])
    kg, _ = patient_grads(s, model)
    k = 1.5 + 0.5
    want = 0.5 * 0.5 * ((y - mu) ** 2 / k**2 - 1.0 / k)
    assert kg.log_noise_variance == pytest.approx(want, rel=1e-9)


@pytest.mark.parametrize("kind", ["mlp", "rnn", "mixture"])
def test_grads_match_finite_differences(kind):
    for seed in (5, 6):
        series, model = random_instance(seed, mean_kind=kind)
        x0 = flatten_params(model, series.id)
        kg, ng = patient_grads(series, model)
        analytic = flatten_grads(kg, ng)

        def objective(vec):
            set_params(model, series.id, vec)
            return patient_log_marginal(series, model)

        numeric = central_diff(objective, x0)
        set_params(model, series.id, x0)
        assert rel_err(analytic, numeric).max() < 1e-4


# ---------------------------------------------------------------------------
# joint reference models
# ---------------------------------------------------------------------------

def small_cohort(seed, p=2, t=2, d=1):
    rng = np.random.default_rng(seed)
    return [PatientSeries(id=f"p{i}", inputs=rng.normal(size=(t, d)),
                          targets=rng.normal(size=t)) for i in range(p)]


def test_megp_zero_global_reduces_to_block_sum():
    cohort = small_cohort(0, p=3, t=2)
    per = {s.id: kp([0.2], 0.1, np.log(0.3)) for s in cohort}
    kg = kp([0.0], NEG_INF_SIGNAL, 0.0)
    got = megp_joint_log_marginal(cohort, kg, per)
    model = identity_model(1)
    model.kernels.update(per)
    want = sum(patient_log_marginal(s, model) for s in cohort)
    assert got == pytest.approx(want, abs=1e-8)


def test_megp_single_patient_combined_kernel():
    cohort = small_cohort(1, p=1, t=3)
    s = cohort[0]
    theta = kp([0.1], -0.2, np.log(0.2))
    kg = kp([-0.3], 0.4, 0.0)
    got = megp_joint_log_marginal(cohort, kg, {s.id: theta})
    n = s.length
    cov = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            cov[a, b] = (rbf_ard(s.inputs[a], s.inputs[b], kg)
                         + rbf_ard(s.inputs[a], s.inputs[b], theta)
                         + (0.2 if a == b else 0.0))
    want = multivariate_normal(mean=np.zeros(n), cov=cov).logpdf(s.targets)
    assert got == pytest.approx(want, abs=1e-8)


def test_megp_bivariate_closed_form():
    cohort = small_cohort(2, p=2, t=1)
    per = {s.id: kp([0.0], 0.2, np.log(0.4)) for s in cohort}
    kg = kp([0.5], -0.1, 0.0)
    got = megp_joint_log_marginal(cohort, kg, per)
    x0, x1 = cohort[0].inputs[0], cohort[1].inputs[0]
    v0 = rbf_ard(x0, x0, kg) + rbf_ard(x0, x0, per["p0"]) + 0.4
    v1 = rbf_ard(x1, x1, kg) + rbf_ard(x1, x1, per["p1"]) + 0.4
    c = rbf_ard(x0, x1, kg)
    y = np.array([cohort[0].targets[0], cohort[1].targets[0]])
    det = v0 * v1 - c * c
    quad = (v1 * y[0]**2 - 2 * c * y[0] * y[1] + v0 * y[1]**2) / det
    want = -0.5 * quad - 0.5 * np.log(det) - LOG2PI
    assert got == pytest.approx(want, abs=1e-10)


def test_megp_size_cap():
    cohort = [PatientSeries(id=f"p{i}", inputs=np.zeros((21, 1)),
                            targets=np.zeros(21)) for i in range(10)]
    with pytest.raises(InstanceTooLarge):
        megp_joint_log_marginal(cohort, kp([0.0], 0.0, 0.0),
                                {s.id: kp([0.0], 0.0, 0.0) for s in cohort})


def test_mtgp_identity_task_decouples():
    cohort = small_cohort(3, p=3, t=2)
    kg = kp([0.1], 0.2, np.log(0.3))
    got = mtgp_joint_log_marginal(cohort, np.eye(3), kg)
    model = identity_model(1)
    for s in cohort:
        model.kernels[s.id] = kg
    want = sum(patient_log_marginal(s, model) for s in cohort)
    assert got == pytest.approx(want, abs=1e-8)


def test_mtgp_all_ones_pools_identical_patients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 1))
    kg = kp([0.0], 0.1, np.log(0.25))
    cohort = [PatientSeries(id="a", inputs=x, targets=rng.normal(size=2)),
              PatientSeries(id="b", inputs=x, targets=rng.normal(size=2))]
    got = mtgp_joint_log_marginal(cohort, np.ones((2, 2)), kg)
    pooled = PatientSeries(id="ab", inputs=np.vstack([x, x]),
                           targets=np.concatenate([cohort[0].targets, cohort[1].targets]))
    model = identity_model(1)
    model.kernels["ab"] = kg
    want = patient_log_marginal(pooled, model)
    assert got == pytest.approx(want, abs=1e-8)


def test_mtgp_matches_dense_gaussian_oracle():
    cohort = small_cohort(5, p=2, t=2)
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2, 2))
    task = a @ a.T + 2 * np.eye(2)
    kg = kp([0.2], -0.1, np.log(0.2))
    got = mtgp_joint_log_marginal(cohort, task, kg)
    n = 4
    pts = [(i, t) for i in range(2) for t in range(2)]
    cov = np.zeros((n, n))
    for u, (i, t) in enumerate(pts):
        for v, (j, tp) in enumerate(pts):
            cov[u, v] = task[i, j] * rbf_ard(cohort[i].inputs[t], cohort[j].inputs[tp], kg)
            if u == v:
                cov[u, v] += 0.2
    y = np.concatenate([s.targets for s in cohort])
    want = multivariate_normal(mean=np.zeros(n), cov=cov).logpdf(y)
    assert got == pytest.approx(want, abs=1e-8)


# ---------------------------------------------------------------------------
# cohort objective
# ---------------------------------------------------------------------------

def test_cohort_single_patient():
    series, model = random_instance(7, mean_kind="mlp")
    assert cohort_log_marginal([series], model) == pytest.approx(
        patient_log_marginal(series, model))


def test_cohort_two_identical_patients_double():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(sharing="p-gps-both", embed_dim=2)
    model = new_model(cfg, input_dim=1, seed=0)
    x = rng.normal(size=(3, 1))
    y = rng.normal(size=3)
    cohort = [PatientSeries(id="a", inputs=x, targets=y),
              PatientSeries(id="b", inputs=x, targets=y)]
    total = cohort_log_marginal(cohort, model)
    single = patient_log_marginal(cohort[0], model)
    assert total == pytest.approx(2.0 * single, rel=1e-12)


def test_cohort_additive_decomposition():
    cohort = small_cohort(9, p=3, t=3)
    model = identity_model(1)
    for s in cohort:
        model.kernels[s.id] = kp([0.1], 0.0, np.log(0.2))
    full = cohort_log_marginal(cohort, model)
    dropped = cohort_log_marginal(cohort[:-1], model)
    last = patient_log_marginal(cohort[-1], model)
    assert full == pytest.approx(dropped + last, rel=1e-12)


def test_cohort_equals_megp_with_zero_global():
    # identity embedding + zero mean: block-diagonal joint == sum of patients
    cohort = small_cohort(10, p=3, t=3)
    model = identity_model(1)
    per = {}
    rng = np.random.default_rng(11)
    for s in cohort:
        per[s.id] = kp(rng.uniform(-0.3, 0.3, 1), float(rng.uniform(-0.3, 0.3)),
                       float(np.log(rng.uniform(0.1, 0.4))))
        model.kernels[s.id] = per[s.id]
    got = cohort_log_marginal(cohort, model)
    want = megp_joint_log_marginal(cohort, kp([0.0], NEG_INF_SIGNAL, 0.0), per)
    assert got == pytest.approx(want, abs=1e-8)


def test_permutation_invariance_mlp_mean():
    series, model = random_instance(12, mean_kind="mlp", max_t=6)
    if series.length < 2:
        series = PatientSeries(id=series.id,
                               inputs=np.vstack([series.inputs, series.inputs]),
                               targets=np.concatenate([series.targets, series.targets]))
    perm = np.random.default_rng(0).permutation(series.length)
    shuffled = PatientSeries(id=series.id, inputs=series.inputs[perm],
                             targets=series.targets[perm])
    assert patient_log_marginal(series, model) == pytest.approx(
        patient_log_marginal(shuffled, model), rel=1e-10)
