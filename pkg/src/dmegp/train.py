"""Minibatch alternating training of the shared networks and patient kernels.

Every batch runs two phases in a fixed order. First the shared network
weights move, using the batch-summed gradient minus an L2 pull toward zero
(the penalty never touches kernel hyperparameters, which are scale
parameters, not weights). Then every patient in the batch gets its own
kernel-parameter update, recomputed against the just-updated networks. In
the nothing-shared ablation mode the first phase instead updates each batch
member's private embedding net. Patients outside the current batch are
never touched.

A patient whose covariance cannot be factorized even at maximum jitter is
skipped for that batch with a warning; training continues.

``fit`` adds patient-level validation with early stopping: the metric is
the mean validation objective for regression or the validation AUC for
classification, scored with cohort-mean kernel parameters (optionally a few
adaptation steps), and the best-scoring snapshot is returned.
"""
from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyCohort, NumericError
from .kernel import kg_vector, kp_from_vector, kp_vector
from .metrics import auc
from .model import (DmeGpModel, ModelConfig, PatientSeries, SHARED_KERNEL_KEY,
                    _patient_grads_impl, new_model, patient_objective)
from .nn import grad_arrays, net_arrays, replace_net_arrays
from .optim import AdamState, adam_step

__all__ = ["TrainConfig", "TrainerState", "EpochLog", "TrainHistory",
           "train_epoch", "fit", "validation_metric"]

log = logging.getLogger("dmegp.train")

WORKERS_ENV_VAR = "DMEGP_WORKERS"


@dataclass(frozen=True)
class TrainConfig:
    minibatch: int = 16
    epochs: int = 80
    patience: int = 10
    l2: float = 1e-4
    seed: int = 0
    inner_theta_steps: int = 1
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    val_adapt_steps: int = 0

    def __post_init__(self):
        if self.minibatch < 1:
            raise ConfigError("minibatch size must be >= 1")
        if self.epochs < 0 or self.patience < 1 or self.inner_theta_steps < 1:
            raise ConfigError("epochs >= 0, patience >= 1, inner_theta_steps >= 1 required")
        if self.l2 < 0 or self.step_size <= 0:
            raise ConfigError("l2 >= 0 and step_size > 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


@dataclass
class TrainerState:
    """Optimizer state per parameter group: one for the shared nets, one per
    patient kernel (or the single shared kernel), one per private net."""

    shared: AdamState | None = None
    kernels: dict[str, AdamState] = field(default_factory=dict)
    nets: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: DmeGpModel, cfg: TrainConfig) -> "TrainerState":
        shared = None
        if not model.config.per_patient_embedding:
            shared = AdamState.for_arrays(net_arrays(model.shared),
                                          step_size=cfg.step_size, beta1=cfg.beta1,
                                          beta2=cfg.beta2, eps=cfg.eps)
        return cls(shared=shared)


@dataclass
class EpochLog:
    epoch: int
    mean_log_likelihood: float
    skipped: int
    val_metric: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochLog]
    initial_val_metric: float | None
    best_epoch: int
    best_val_metric: float | None


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV_VAR, "1")))
    except ValueError:
        return 1


def _batch_grads(model: DmeGpModel, batch: list[PatientSeries], with_network: bool):
    """Per-patient gradients; numerically failing patients come back as None."""

    def one(series):
        try:
            return _patient_grads_impl(series, model, with_network=with_network)
        except NumericError as exc:
            log.warning("skipping patient %r this batch: %s", series.id, exc)
            return None

    workers = _worker_count()
    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, batch))
    return [one(s) for s in batch]


def _kernel_state(state: TrainerState, model: DmeGpModel, key: str,
                  cfg: TrainConfig) -> AdamState:
    st = state.kernels.get(key)
    if st is None:
        st = AdamState.for_arrays([kp_vector(model.kernels[key])],
                                  step_size=cfg.step_size, beta1=cfg.beta1,
                                  beta2=cfg.beta2, eps=cfg.eps)
        state.kernels[key] = st
    return st


def _net_state(state: TrainerState, model: DmeGpModel, pid: str,
               cfg: TrainConfig) -> AdamState:
    st = state.nets.get(pid)
    if st is None:
        st = AdamState.for_arrays(net_arrays(model.embeddings[pid]),
                                  step_size=cfg.step_size, beta1=cfg.beta1,
                                  beta2=cfg.beta2, eps=cfg.eps)
        state.nets[pid] = st
    return st


def _apply_l2(grads: list[np.ndarray], params: list[np.ndarray], l2: float):
    if l2 == 0.0:
        return grads
    return [g - l2 * p for g, p in zip(grads, params)]


def train_epoch(
    model: DmeGpModel,
    data: list[PatientSeries],
    cfg: TrainConfig,
    opt: TrainerState,
    rng: np.random.Generator,
) -> tuple[DmeGpModel, TrainerState, EpochLog]:
    """One pass over a seeded shuffle of the cohort in minibatches.

    Returns the updated model and optimizer state plus the epoch mean of the
    per-patient objective (measured at the parameters each batch started
    from).
    """
    if not data:
        raise EmptyCohort("cannot train on an empty cohort")
    for series in data:
        model.ensure_patient(series.id)

    order = rng.permutation(len(data))
    values: list[float] = []
    skipped = 0

    for start in range(0, len(order), cfg.minibatch):
        batch = [data[i] for i in order[start:start + cfg.minibatch]]

        # phase 1: network update (shared, or per-patient in p-gps mode)
        results = _batch_grads(model, batch, with_network=True)
        ok = [(s, r) for s, r in zip(batch, results) if r is not None]
        skipped += len(batch) - len(ok)
        values.extend(r[2] for _, r in ok)
        if not ok:
            continue
        if model.config.per_patient_embedding:
            for series, (_, ngrads, _) in ok:
                params = net_arrays(model.embeddings[series.id])
                garrs = _apply_l2(grad_arrays(ngrads), params, cfg.l2)
                st = _net_state(opt, model, series.id, cfg)
                new_params, opt.nets[series.id] = adam_step(st, params, garrs)
                model.embeddings[series.id] = replace_net_arrays(
                    model.embeddings[series.id], new_params)
        else:
            params = net_arrays(model.shared)
            total = [np.zeros_like(p) for p in params]
            for _, (_, ngrads, _) in ok:
                for acc, g in zip(total, grad_arrays(ngrads)):
                    acc += g
            total = _apply_l2(total, params, cfg.l2)
            new_params, opt.shared = adam_step(opt.shared, params, total)
            model.shared = replace_net_arrays(model.shared, new_params)

        # phase 2: kernel updates against the just-updated networks
        batch_ids = [s.id for s, _ in ok]
        for _ in range(cfg.inner_theta_steps):
            if model.config.shared_theta:
                kvecs = []
                for series in (s for s, _ in ok):
                    try:
                        kgrads, _, _ = _patient_grads_impl(series, model, with_network=False)
                    except NumericError as exc:
                        log.warning("skipping patient %r in kernel phase: %s", series.id, exc)
                        continue
                    kvecs.append(kg_vector(kgrads))
                if not kvecs:
                    continue
                key = SHARED_KERNEL_KEY
                st = _kernel_state(opt, model, key, cfg)
                (vec,), opt.kernels[key] = adam_step(
                    st, [kp_vector(model.kernels[key])], [np.sum(kvecs, axis=0)])
                model.kernels[key] = kp_from_vector(vec)
            else:
                for series in (s for s, _ in ok):
                    try:
                        kgrads, _, _ = _patient_grads_impl(series, model, with_network=False)
                    except NumericError as exc:
                        log.warning("skipping patient %r in kernel phase: %s", series.id, exc)
                        continue
                    st = _kernel_state(opt, model, series.id, cfg)
                    (vec,), opt.kernels[series.id] = adam_step(
                        st, [kp_vector(model.kernels[series.id])], [kg_vector(kgrads)])
                    model.kernels[series.id] = kp_from_vector(vec)
        del batch_ids

    mean_ll = float(np.mean(values)) if values else float("nan")
    return model, opt, EpochLog(epoch=0, mean_log_likelihood=mean_ll, skipped=skipped)


# ---------------------------------------------------------------------------
# validation and fit
# ---------------------------------------------------------------------------

def validation_metric(model: DmeGpModel, validation: list[PatientSeries],
                      val_adapt_steps: int = 0, adapt_step_size: float = 0.05) -> float:
    """Generalization score on held-out patients.

    Regression: mean per-patient objective under cohort-mean kernel
    parameters (optionally adapted on the patient's own series). Binary
    likelihood: AUC of last-step predictions given each patient's earlier
    steps; falls back to the mean objective if only one class is present.
    """
    from .infer import AdaptationConfig, adapt_new_patient, predict_classification

    if not validation:
        raise EmptyCohort("validation cohort is empty")
    cfg = AdaptationConfig(steps=val_adapt_steps, step_size=adapt_step_size,
                           init="cohort-mean")
    if model.config.likelihood == "gaussian":
        total = 0.0
        for series in validation:
            theta = adapt_new_patient(series, model, cfg)
            probe = DmeGpModel(config=model.config, shared=model.shared,
                               kernels={model.kernel_key(series.id): theta},
                               embeddings=model.embeddings, init_seed=model.init_seed)
            total += patient_objective(series, probe)
        return total / len(validation)

    labels, scores = [], []
    for series in validation:
        if series.length < 2:
            continue
        prefix = PatientSeries(id=series.id, inputs=series.inputs[:-1],
                               targets=series.targets[:-1])
        theta = adapt_new_patient(prefix, model, cfg)
        pred = predict_classification(prefix, series.inputs[-1], theta, model)
        labels.append(series.targets[-1])
        scores.append(pred.class_probability)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyCohort("no validation patient has length >= 2")
    if len(set(labels.tolist())) < 2:
        probe_scores = [patient_objective(s, model) for s in validation]
        return float(np.mean(probe_scores))
    return auc(labels, np.asarray(scores))


def _carve_validation(data: list[PatientSeries], cfg: TrainConfig):
    ids = sorted(s.id for s in data)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xa1]))
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(cfg.val_fraction * len(ids)))) if cfg.val_fraction > 0 else 0
    val_ids = {ids[i] for i in order[:n_val]}
    train = [s for s in data if s.id not in val_ids]
    val = [s for s in data if s.id in val_ids]
    if not train:
        train, val = val, []
    return train, val


def fit(
    data: list[PatientSeries],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    validation: list[PatientSeries] | None = None,
    init_model: DmeGpModel | None = None,
) -> tuple[DmeGpModel, TrainHistory]:
    """Run training epochs with early stopping on the validation metric.

    A validation split is carved from ``data`` by patient (seeded) when none
    is supplied. Returns the snapshot that scored best on validation (the
    initialized model when the epoch cap is 0).
    """
    if not data:
        raise EmptyCohort("cannot fit on an empty cohort")
    if validation is None:
        data, validation = _carve_validation(data, cfg)
        if not data:
            raise EmptyCohort("no training patients left after the validation carve")
    model = init_model if init_model is not None else new_model(
        model_cfg, input_dim=data[0].input_dim, seed=cfg.seed)

    opt = TrainerState.for_model(model, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xe90c]))

    have_val = bool(validation)
    initial_val = validation_metric(model, validation, cfg.val_adapt_steps) if have_val else None
    best_val = -np.inf
    best_epoch = 0
    best_snapshot = copy.deepcopy(model)
    epochs: list[EpochLog] = []
    bad = 0

    for epoch in range(1, cfg.epochs + 1):
        model, opt, elog = train_epoch(model, data, cfg, opt, rng)
        elog.epoch = epoch
        if have_val:
            elog.val_metric = validation_metric(model, validation, cfg.val_adapt_steps)
        epochs.append(elog)
        log.info("epoch %d: train=%.6f val=%s skipped=%d", epoch,
                 elog.mean_log_likelihood, elog.val_metric, elog.skipped)
        track = elog.val_metric if have_val else elog.mean_log_likelihood
        if track is not None and np.isfinite(track) and track > best_val:
            best_val = track
            best_epoch = epoch
            best_snapshot = copy.deepcopy(model)
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    history = TrainHistory(
        epochs=epochs, initial_val_metric=initial_val, best_epoch=best_epoch,
        best_val_metric=None if best_val == -np.inf else float(best_val))
    return best_snapshot, history
