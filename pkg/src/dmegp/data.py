"""Synthetic cohorts, windowing, normalization, splits and CSV ingestion.

The regression generator draws one series per patient from
y = x + sin(x) + eps with eps ~ Normal(mu_i, sigma^2) and a per-patient
offset mu_i, which makes cohort heterogeneity visible at desk scale:
training patients cover only the training input range, held-out patients
continue into the extrapolation range. A companion generator produces
binary cohorts by pushing a latent trend-plus-GP sample through a sigmoid
and drawing Bernoulli labels, so classification code paths have ground
truth too.

CSV schema (UTF-8, header required):
    patient_id,time_index,x_0,...,x_{d-1},y
``time_index`` must be a non-negative integer, strictly increasing within a
patient. Empty feature cells mean "missing" and are carried as NaN until
``normalize`` maps them to zero.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import (DataError, DimensionMismatch, EmptyCohort, MalformedRow,
                     NonMonotonicTime, SeriesTooShort)
from .model import PatientSeries

__all__ = [
    "SyntheticSpec",
    "DatasetManifest",
    "generate_motivating",
    "generate_classification",
    "motivating_split",
    "make_windows",
    "normalize",
    "denormalize_features",
    "apply_normalization",
    "split_by_patient",
    "load_csv",
    "save_csv",
    "cohort_to_csv_text",
]

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic cohorts; every value is config-exposed."""

    n_train: int = 40
    n_test: int = 4
    steps: int = 30
    offset_mean: float = 0.0
    offset_spread: float = 2.0
    noise_sd: float = 0.1
    train_range: tuple[float, float] = (0.0, 6.0)
    extrap_range: tuple[float, float] = (6.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_train + self.n_test < 1 or self.steps < 1:
            raise DataError("need at least one patient and one step")
        if self.noise_sd < 0 or self.offset_spread < 0:
            raise DataError("spread parameters must be non-negative")
        if not (self.train_range[0] < self.train_range[1] <= self.extrap_range[0]
                < self.extrap_range[1]):
            raise DataError("training range must precede the extrapolation range")


@dataclass(frozen=True)
class DatasetManifest:
    """Feature statistics (train split only) and the patient-level split."""

    feature_count: int
    means: np.ndarray
    stds: np.ndarray
    task: str
    split: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=np.float64))
        if self.means.shape != (self.feature_count,) or self.stds.shape != (self.feature_count,):
            raise DimensionMismatch("statistics do not match feature_count")
        if np.any(self.stds <= 0):
            raise DataError("standard deviations must be positive after degenerate handling")

    def ids_for(self, split_name: str) -> list[str]:
        return sorted(pid for pid, s in self.split.items() if s == split_name)


def _trend(x: np.ndarray) -> np.ndarray:
    return x + np.sin(x)


def generate_motivating(spec: SyntheticSpec) -> list[PatientSeries]:
    """Heterogeneous regression cohort from y = x + sin(x) + offset noise.

    Training patients ("train-*") sample the training range only; test
    patients ("test-*") run through the extrapolation range as well. Fully
    reproducible from the seed: per-patient streams are spawned from it.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_train + spec.n_test)
    cohort: list[PatientSeries] = []
    for i in range(spec.n_train):
        rng = np.random.default_rng(seeds[i])
        x = np.linspace(spec.train_range[0], spec.train_range[1], spec.steps)
        mu_i = spec.offset_mean + spec.offset_spread * rng.standard_normal()
        eps = mu_i + spec.noise_sd * rng.standard_normal(spec.steps)
        cohort.append(PatientSeries(id=f"train-{i:03d}", inputs=x[:, None],
                                    targets=_trend(x) + eps))
    for j in range(spec.n_test):
        rng = np.random.default_rng(seeds[spec.n_train + j])
        x = np.linspace(spec.train_range[0], spec.extrap_range[1], spec.steps)
        mu_i = spec.offset_mean + spec.offset_spread * rng.standard_normal()
        eps = mu_i + spec.noise_sd * rng.standard_normal(spec.steps)
        cohort.append(PatientSeries(id=f"test-{j:03d}", inputs=x[:, None],
                                    targets=_trend(x) + eps))
    return cohort


def generate_classification(
    spec: SyntheticSpec,
    latent_signal: float = 1.0,
    latent_lengthscale: float = 1.5,
) -> list[PatientSeries]:
    """Binary cohort: Bernoulli draws from a sigmoid-squashed latent.

    The latent is sin(x) plus a per-patient offset plus a smooth per-patient
    GP sample (RBF with the given signal and length-scale). Invented
    plumbing so the classification paths can be exercised end to end.
    """
    n_total = spec.n_train + spec.n_test
    seeds = np.random.SeedSequence(spec.seed).spawn(n_total)
    cohort: list[PatientSeries] = []
    for i in range(n_total):
        rng = np.random.default_rng(seeds[i])
        role = "train" if i < spec.n_train else "test"
        idx = i if i < spec.n_train else i - spec.n_train
        hi = spec.train_range[1] if role == "train" else spec.extrap_range[1]
        x = np.linspace(spec.train_range[0], hi, spec.steps)
        mu_i = spec.offset_mean + spec.offset_spread * rng.standard_normal()
        d2 = (x[:, None] - x[None, :]) ** 2 / latent_lengthscale**2
        cov = latent_signal * np.exp(-0.5 * d2) + 1e-10 * np.eye(spec.steps)
        sample = np.linalg.cholesky(cov) @ rng.standard_normal(spec.steps)
        latent = np.sin(x) + mu_i + sample
        prob = 1.0 / (1.0 + np.exp(-latent))
        y = (rng.uniform(size=spec.steps) < prob).astype(np.float64)
        cohort.append(PatientSeries(id=f"{role}-{idx:03d}", inputs=x[:, None], targets=y))
    return cohort


def motivating_split(cohort: list[PatientSeries], val_fraction: float = 0.1,
                     seed: int = 0) -> dict[str, str]:
    """Split by id prefix: test-* patients are the test split, a seeded
    fraction of the rest becomes validation."""
    train_ids = sorted(s.id for s in cohort if not s.id.startswith("test-"))
    split = {s.id: "test" for s in cohort if s.id.startswith("test-")}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5b11]))
    order = rng.permutation(len(train_ids))
    n_val = int(round(val_fraction * len(train_ids))) if len(train_ids) > 1 else 0
    for pos, i in enumerate(order):
        split[train_ids[i]] = "val" if pos < n_val else "train"
    return split


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def make_windows(series: PatientSeries, lag: int, horizon: int) -> PatientSeries:
    """Fixed-window supervision: inputs are the last lag+1 steps' features
    and targets, the target sits ``horizon`` steps ahead.

    A series of length T yields T - lag - horizon windows; anything shorter
    than lag + horizon + 1 raises SeriesTooShort. Window t references only
    original steps <= t for its inputs and t + horizon for its target.
    """
    if lag < 0 or horizon < 1:
        raise DataError("lag must be >= 0 and horizon >= 1")
    t_len = series.length
    n_win = t_len - lag - horizon
    if n_win < 1:
        raise SeriesTooShort(
            f"patient {series.id!r}: T={t_len} < lag+horizon+1={lag + horizon + 1}")
    rows = []
    targets = []
    for t in range(lag, t_len - horizon):
        xs = series.inputs[t - lag:t + 1].ravel()
        ys = series.targets[t - lag:t + 1]
        rows.append(np.concatenate([xs, ys]))
        targets.append(series.targets[t + horizon])
    return PatientSeries(id=series.id, inputs=np.vstack(rows), targets=np.asarray(targets))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(
    cohort: list[PatientSeries],
    split: dict[str, str] | None = None,
    task: str = "regression",
) -> tuple[list[PatientSeries], DatasetManifest]:
    """Standardize features using training-split statistics only.

    Missing entries (NaN) are excluded from the statistics and become 0
    after the transform; features that are constant on the training split
    get standard deviation 1 so they map to 0 rather than blowing up.
    Targets pass through unchanged.
    """
    if not cohort:
        raise EmptyCohort("cannot normalize an empty cohort")
    split = split or {s.id: "train" for s in cohort}
    train_rows = [s.inputs for s in cohort if split.get(s.id, "train") == "train"]
    if not train_rows:
        raise EmptyCohort("no training-split patients to compute statistics from")
    stacked = np.vstack(train_rows)
    with np.errstate(invalid="ignore"):
        means = np.nanmean(stacked, axis=0)
        stds = np.nanstd(stacked, axis=0)
    means = np.where(np.isfinite(means), means, 0.0)
    stds = np.where(np.isfinite(stds) & (stds > 0), stds, 1.0)

    out = []
    for s in cohort:
        z = (s.inputs - means) / stds
        z = np.where(np.isnan(z), 0.0, z)
        out.append(PatientSeries(id=s.id, inputs=z, targets=s.targets))
    manifest = DatasetManifest(feature_count=stacked.shape[1], means=means,
                               stds=stds, task=task, split=dict(split))
    return out, manifest


def apply_normalization(cohort: list[PatientSeries], manifest: DatasetManifest):
    """Transform a cohort with previously computed statistics."""
    out = []
    for s in cohort:
        if s.input_dim != manifest.feature_count:
            raise DimensionMismatch(
                f"patient {s.id!r} has {s.input_dim} features, manifest expects "
                f"{manifest.feature_count}")
        z = (s.inputs - manifest.means) / manifest.stds
        z = np.where(np.isnan(z), 0.0, z)
        out.append(PatientSeries(id=s.id, inputs=z, targets=s.targets))
    return out


def denormalize_features(values: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    """Inverse of the feature transform (exact on non-missing entries)."""
    return np.asarray(values, dtype=np.float64) * manifest.stds + manifest.means


def split_by_patient(
    cohort: list[PatientSeries],
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> dict[str, str]:
    """Deterministic patient-level split: seeded shuffle, contiguous cuts."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must be positive and sum to 1")
    ids = sorted({s.id for s in cohort})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    cut1 = int(round(fractions[0] * len(ids)))
    cut2 = int(round((fractions[0] + fractions[1]) * len(ids)))
    assignment = {}
    for pos, i in enumerate(order):
        assignment[ids[i]] = "train" if pos < cut1 else ("val" if pos < cut2 else "test")
    return assignment


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _parse_header(header: list[str]) -> int:
    expected_prefix = ["patient_id", "time_index"]
    if len(header) < 4 or header[:2] != expected_prefix or header[-1] != "y":
        raise MalformedRow(1, f"unexpected header {header!r}")
    d = len(header) - 3
    for k, name in enumerate(header[2:-1]):
        if name != f"x_{k}":
            raise MalformedRow(1, f"feature column {k} named {name!r}, expected x_{k}")
    return d


def load_csv(path_or_text) -> list[PatientSeries]:
    """Read a cohort; rows grouped by patient, ordered by time_index.

    Accepts a filesystem path or a file-like object. Raises MalformedRow
    with the offending 1-based line number, and NonMonotonicTime naming the
    patient whose time indices go backwards.
    """
    if hasattr(path_or_text, "read"):
        return _load_csv_stream(path_or_text)
    with open(path_or_text, "r", encoding="utf-8", newline="") as fh:
        return _load_csv_stream(fh)


def _load_csv_stream(fh) -> list[PatientSeries]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "empty file") from None
    d = _parse_header([h.strip() for h in header])

    order: list[str] = []
    rows: dict[str, list[tuple[int, np.ndarray, float]]] = {}
    last_time: dict[str, int] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and row[0].strip() == ""):
            continue
        if len(row) != d + 3:
            raise MalformedRow(line_no, f"expected {d + 3} cells, got {len(row)}")
        pid = row[0].strip()
        if not pid:
            raise MalformedRow(line_no, "empty patient_id")
        try:
            t_idx = int(row[1])
        except ValueError:
            raise MalformedRow(line_no, f"time_index {row[1]!r} is not an integer") from None
        if t_idx < 0:
            raise MalformedRow(line_no, f"time_index {t_idx} is negative")
        feats = np.empty(d)
        for k, cell in enumerate(row[2:2 + d]):
            cell = cell.strip()
            if cell == "":
                feats[k] = np.nan  # missing
            else:
                try:
                    feats[k] = float(cell)
                except ValueError:
                    raise MalformedRow(line_no, f"x_{k} value {cell!r} is not a number") from None
        y_cell = row[-1].strip()
        if y_cell == "":
            raise MalformedRow(line_no, "missing target value")
        try:
            y = float(y_cell)
        except ValueError:
            raise MalformedRow(line_no, f"target {y_cell!r} is not a number") from None
        if not math.isfinite(y):
            raise MalformedRow(line_no, f"target {y_cell!r} is not finite")
        if pid in last_time and t_idx <= last_time[pid]:
            raise NonMonotonicTime(pid, f"line {line_no}")
        last_time[pid] = t_idx
        if pid not in rows:
            rows[pid] = []
            order.append(pid)
        rows[pid].append((t_idx, feats, y))

    if not rows:
        raise EmptyCohort("CSV contains a header but no data rows")
    cohort = []
    for pid in order:
        entries = rows[pid]
        cohort.append(PatientSeries(
            id=pid,
            inputs=np.vstack([f for _, f, _ in entries]),
            targets=np.asarray([y for _, _, y in entries]),
        ))
    return cohort


def cohort_to_csv_text(cohort: list[PatientSeries]) -> str:
    """Serialize a cohort to the documented schema (repr floats round-trip)."""
    if not cohort:
        raise EmptyCohort("cannot serialize an empty cohort")
    d = cohort[0].input_dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "time_index"] + [f"x_{k}" for k in range(d)] + ["y"])
    for s in cohort:
        if s.input_dim != d:
            raise DimensionMismatch("cohort has mixed feature counts")
        for t in range(s.length):
            cells = [s.id, str(t)]
            for v in s.inputs[t]:
                cells.append("" if math.isnan(v) else repr(float(v)))
            cells.append(repr(float(s.targets[t])))
            writer.writerow(cells)
    return buf.getvalue()


def save_csv(cohort: list[PatientSeries], path) -> None:
    text = cohort_to_csv_text(cohort)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
