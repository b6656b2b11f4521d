"""Command-line surface: train, predict, eval, ablate, plot-data, gen-data.

Every command writes its outputs plus a ``manifest.toml`` capturing each
effective setting, so re-running from the manifest reproduces the outputs
byte for byte. Outputs are CSV (traces, metrics, predictions) or the
documented key-value model format; all files are written atomically.

Exit codes: 0 ok, 2 configuration problem, 3 data problem, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from . import serialize
from .config import EvalConfig, RunConfig, load_run_config, to_manifest_toml
from .errors import ConfigError, DataError, DmegpError, EmptyCohort, NumericError
from .infer import (adapt_new_patient, adapt_p_gps_patient,
                    predict_classification, predict_regression,
                    sequential_forecast)
from .metrics import auc, rmse
from .model import DmeGpModel, ModelConfig, PatientSeries
from .train import TrainConfig, fit
from .serialize import atomic_write_text

log = logging.getLogger("dmegp.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SHARING_MODES = ("dme-gp", "p-gps", "p-gps-cov", "p-gps-both")


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(str(c) if not isinstance(c, float) else _fmt(c) for c in row) + "\n")
    atomic_write_text(path, buf.getvalue())


def _load_cohort(cfg: RunConfig):
    """Cohort plus its split assignment, per the configured source."""
    d = cfg.data
    if d.source == "csv":
        cohort = data_mod.load_csv(d.csv_path)
        ids = {s.id for s in cohort}
        if all(i.startswith(("train-", "test-")) for i in ids):
            split = data_mod.motivating_split(cohort, cfg.data.split_fractions[1], cfg.seed)
        else:
            split = data_mod.split_by_patient(cohort, d.split_fractions, cfg.seed)
    elif d.source == "synthetic-motivating":
        cohort = data_mod.generate_motivating(d.synthetic_spec(cfg.seed))
        split = data_mod.motivating_split(cohort, d.split_fractions[1], cfg.seed)
    else:
        cohort = data_mod.generate_classification(d.synthetic_spec(cfg.seed))
        split = data_mod.motivating_split(cohort, d.split_fractions[1], cfg.seed)
    if d.windowing:
        cohort = [data_mod.make_windows(s, d.lag, d.horizon) for s in cohort]
    return cohort, split


def _task_kind(cfg: RunConfig) -> str:
    return "classification" if cfg.model.likelihood == "bernoulli" else "regression"


def _prepare(cfg: RunConfig):
    cohort, split = _load_cohort(cfg)
    cohort, manifest = data_mod.normalize(cohort, split, task=_task_kind(cfg))
    by_split = {name: [s for s in cohort if split.get(s.id) == name]
                for name in ("train", "val", "test")}
    return cohort, manifest, by_split


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _emit_manifest(cfg: RunConfig, out: str, extras: dict | None = None) -> None:
    atomic_write_text(os.path.join(out, "manifest.toml"), to_manifest_toml(cfg, extras))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg.output_dir)
    cohort, split = _load_cohort(cfg)
    data_mod.save_csv(cohort, os.path.join(out, "cohort.csv"))
    _, manifest = data_mod.normalize(cohort, split, task=_task_kind(cfg))
    serialize.save_manifest(os.path.join(out, "dataset_manifest.txt"), manifest)
    _emit_manifest(cfg, out, {"command": "gen-data"})
    print(f"wrote {len(cohort)} patients to {out}/cohort.csv")
    return EXIT_OK


def _fit_mode(cfg: RunConfig, sharing: str, by_split):
    model_cfg = ModelConfig(**{**_model_cfg_dict(cfg.model), "sharing": sharing})
    train_cohort = by_split["train"]
    val = by_split["val"] or None
    model, history = fit(train_cohort, cfg.train, model_cfg, validation=val)
    return model, history


def _model_cfg_dict(mc: ModelConfig) -> dict:
    return dict(sharing=mc.sharing, likelihood=mc.likelihood, mean_kind=mc.mean_kind,
                embed_dim=mc.embed_dim, embed_hidden=mc.embed_hidden,
                mean_hidden=mc.mean_hidden, n_experts=mc.n_experts,
                gate_hidden=mc.gate_hidden)


def _history_rows(history) -> list[list]:
    rows = [[0, "", "" if history.initial_val_metric is None
             else _fmt(history.initial_val_metric), 0]]
    for e in history.epochs:
        rows.append([e.epoch, _fmt(e.mean_log_likelihood),
                     "" if e.val_metric is None else _fmt(e.val_metric), e.skipped])
    return rows


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg.output_dir)
    cohort, manifest, by_split = _prepare(cfg)
    if not by_split["train"]:
        raise EmptyCohort("no patients assigned to the training split")
    model, history = _fit_mode(cfg, cfg.model.sharing, by_split)
    serialize.save_model(os.path.join(out, "model.txt"), model, manifest)
    _write_rows(os.path.join(out, "history.csv"),
                ["epoch", "train_mean_ll", "val_metric", "skipped"],
                _history_rows(history))
    _emit_manifest(cfg, out, {"command": "train"})
    for e in history.epochs:
        print(f"epoch {e.epoch}: train={e.mean_log_likelihood:.6f} "
              f"val={'' if e.val_metric is None else format(e.val_metric, '.6f')} "
              f"skipped={e.skipped}")
    print(f"best epoch {history.best_epoch}; model written to {out}/model.txt")
    return EXIT_OK


def _load_history_csv(path, manifest) -> PatientSeries | None:
    """One patient's history; a header-only file means no history."""
    try:
        cohort = data_mod.load_csv(path)
    except EmptyCohort:
        return None
    if len(cohort) != 1:
        raise DataError(f"history file must hold exactly one patient, found {len(cohort)}")
    series = data_mod.apply_normalization(cohort, manifest)[0] if manifest else cohort[0]
    return series


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model, manifest = serialize.load_model(args.model)
    history = _load_history_csv(args.history, manifest)
    queries = data_mod.load_csv(args.queries)
    q_inputs = np.vstack([s.inputs for s in queries])
    if manifest is not None:
        q_inputs = np.where(np.isnan(q_inputs), 0.0,
                            (q_inputs - manifest.means) / manifest.stds)
    theta = adapt_new_patient(history, model, cfg.adapt)
    rows = []
    classed = model.config.likelihood == "bernoulli"
    for qi, x in enumerate(q_inputs):
        trend = (predict_classification(None, x, theta, model) if classed
                 else predict_regression(None, x, theta, model))
        pred = (predict_classification(history, x, theta, model) if classed
                else predict_regression(history, x, theta, model))
        if classed:
            rows.append([qi, _fmt(pred.class_probability), _fmt(pred.latent_mean),
                         _fmt(pred.latent_variance), _fmt(trend.class_probability)])
        else:
            rows.append([qi, _fmt(pred.mean), _fmt(float(np.sqrt(pred.variance))),
                         _fmt(trend.mean)])
    header = (["query_index", "class_probability", "latent_mean", "latent_variance",
               "trend_probability"] if classed
              else ["query_index", "mean", "std", "trend"])
    _write_rows(os.path.join(out, "predictions.csv"), header, rows)
    _emit_manifest(cfg, out, {"command": "predict", "model": args.model,
                              "history": args.history, "queries": args.queries})
    print(f"wrote {len(rows)} predictions to {out}/predictions.csv")
    return EXIT_OK


def _prefix_length(length: int, fraction: float) -> int:
    return max(1, min(length - 1, int(round(fraction * length))))


def _adapt_for_series(prefix: PatientSeries, model: DmeGpModel, cfg: RunConfig):
    """Patient-local adaptation; in the nothing-shared mode the private
    embedding net trains on the prefix alongside the kernel parameters."""
    if model.config.per_patient_embedding:
        net, theta = adapt_p_gps_patient(prefix, model, cfg.adapt)
        model.embeddings[prefix.id] = net
        return theta
    return adapt_new_patient(prefix, model, cfg.adapt)


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model, manifest = serialize.load_model(args.model)
    cohort = data_mod.load_csv(args.data)
    if manifest is not None:
        cohort = data_mod.apply_normalization(cohort, manifest)
    classed = model.config.likelihood == "bernoulli"
    if classed and not set(np.concatenate([s.targets for s in cohort])) <= {0.0, 1.0}:
        raise ConfigError("model expects binary targets but the data is not binary")
    rows = []
    all_pred, all_true = [], []
    labels, scores = [], []
    for series in cohort:
        n_prefix = _prefix_length(series.length, cfg.eval.adapt_prefix)
        prefix = PatientSeries(id=series.id, inputs=series.inputs[:n_prefix],
                               targets=series.targets[:n_prefix])
        theta = _adapt_for_series(prefix, model, cfg)
        if classed:
            pred = predict_classification(prefix, series.inputs[-1], theta, model)
            labels.append(series.targets[-1])
            scores.append(pred.class_probability)
            rows.append([series.id, series.length, _fmt(pred.class_probability),
                         int(series.targets[-1])])
        else:
            preds = sequential_forecast(series, theta, model)
            means = np.array([p.mean for p in preds])
            eval_idx = np.arange(n_prefix, series.length)
            r_all = rmse(means, series.targets)
            r_eval = rmse(means[eval_idx], series.targets[eval_idx])
            all_pred.extend(means[eval_idx])
            all_true.extend(series.targets[eval_idx])
            rows.append([series.id, series.length, _fmt(r_all), _fmt(r_eval)])
    if classed:
        overall = auc(np.array(labels), np.array(scores))
        header = ["patient_id", "length", "class_probability", "label"]
        summary = ["__overall__", len(cohort), _fmt(overall), ""]
        metric_name = "auc"
    else:
        overall = rmse(np.array(all_pred), np.array(all_true))
        header = ["patient_id", "length", "rmse_all", "rmse_eval"]
        summary = ["__overall__", len(cohort), "", _fmt(overall)]
        metric_name = "rmse_eval"
    _write_rows(os.path.join(out, "metrics.csv"), header, [summary] + rows)
    _emit_manifest(cfg, out, {"command": "eval", "model": args.model, "data": args.data})
    print(f"{metric_name} = {overall:.6f} over {len(cohort)} patients")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out_dir(cfg.output_dir)
    cohort, manifest, by_split = _prepare(cfg)
    rows = []
    for sharing in SHARING_MODES:
        model, history = _fit_mode(cfg, sharing, by_split)
        test_metric = ""
        if by_split["test"] and model.config.likelihood == "gaussian":
            preds, trues = [], []
            for series in by_split["test"]:
                n_prefix = _prefix_length(series.length, cfg.eval.adapt_prefix)
                prefix = PatientSeries(id=series.id, inputs=series.inputs[:n_prefix],
                                       targets=series.targets[:n_prefix])
                theta = _adapt_for_series(prefix, model, cfg)
                seq = sequential_forecast(series, theta, model)
                idx = np.arange(n_prefix, series.length)
                preds.extend(seq[i].mean for i in idx)
                trues.extend(series.targets[idx])
            test_metric = _fmt(rmse(np.array(preds), np.array(trues)))
        rows.append([sharing,
                     "" if history.best_val_metric is None else _fmt(history.best_val_metric),
                     test_metric])
        print(f"{sharing}: val={rows[-1][1]} test={rows[-1][2]}")
    _write_rows(os.path.join(out, "ablation.csv"),
                ["mode", "best_val_metric", "test_rmse"], rows)
    _emit_manifest(cfg, out, {"command": "ablate"})
    return EXIT_OK


def cmd_plot_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    model, manifest = serialize.load_model(args.model)
    if model.config.likelihood != "gaussian":
        raise ConfigError("plot-data requires a regression model")
    cohort = data_mod.load_csv(args.data)
    raw_inputs = {s.id: s.inputs for s in cohort}
    if manifest is not None:
        cohort = data_mod.apply_normalization(cohort, manifest)
    matches = [s for s in cohort if s.id == args.patient]
    if not matches:
        raise DataError(f"patient {args.patient!r} not found in {args.data}")
    series = matches[0]
    if args.prior_only:
        preds = [predict_regression(None, x, model.kernel_for(series.id), model)
                 for x in series.inputs]
        trends = [p.mean for p in preds]
    else:
        n_prefix = _prefix_length(series.length, cfg.eval.adapt_prefix)
        prefix = PatientSeries(id=series.id, inputs=series.inputs[:n_prefix],
                               targets=series.targets[:n_prefix])
        theta = _adapt_for_series(prefix, model, cfg)
        preds = sequential_forecast(series, theta, model)
        trends = [predict_regression(None, x, theta, model).mean for x in series.inputs]
    rows = []
    raw = raw_inputs[series.id]
    for t, p in enumerate(preds):
        std = float(np.sqrt(p.variance))
        rows.append([t, _fmt(float(raw[t, 0])), _fmt(float(series.targets[t])),
                     _fmt(p.mean), _fmt(p.mean - std), _fmt(p.mean + std),
                     _fmt(trends[t])])
    _write_rows(os.path.join(out, "trace.csv"),
                ["time_index", "x_0", "target", "mean", "lower", "upper", "trend"],
                rows)
    _emit_manifest(cfg, out, {"command": "plot-data", "model": args.model,
                              "patient": args.patient})
    print(f"wrote {len(rows)} trace rows to {out}/trace.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmegp",
        description="Personalized GP time-series models with shared deep components")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", default=None,
                       help="TOML run config (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="output directory override")

    for name in ("train", "ablate", "gen-data"):
        p = sub.add_parser(name)
        add_common(p)

    p = sub.add_parser("predict")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--queries", required=True)

    p = sub.add_parser("eval")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapt-prefix", type=float, default=None)

    p = sub.add_parser("plot-data")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--adapt-prefix", type=float, default=None)
    p.add_argument("--prior-only", action="store_true")
    return parser


def _resolve_config(args) -> RunConfig:
    from dataclasses import asdict, replace as dc_replace

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dc_replace(cfg, seed=args.seed,
                         train=TrainConfig(**{**asdict(cfg.train), "seed": args.seed}))
    if args.out is not None:
        cfg = dc_replace(cfg, output_dir=args.out)
    prefix = getattr(args, "adapt_prefix", None)
    if prefix is not None:
        cfg = dc_replace(cfg, eval=EvalConfig(adapt_prefix=prefix,
                                              prior_only=cfg.eval.prior_only))
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DMEGP_LOGLEVEL", "WARNING"))
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command in ("predict", "eval", "plot-data") and args.out is None:
            raise ConfigError(f"{args.command} requires --out")
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "predict":
            return cmd_predict(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        if args.command == "plot-data":
            return cmd_plot_data(args, cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DmegpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
