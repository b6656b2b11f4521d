"""Run configuration: TOML in, fully-resolved manifest out.

A run config is a single TOML file with optional sections [data], [model],
[train], [adapt] and [eval]; anything omitted takes the defaults below. The
emitted manifest is itself a valid config file listing every effective
setting, so re-running a command from its manifest reproduces the run.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

from .data import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig
from .infer import AdaptationConfig

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:
    import tomli as tomllib

__all__ = ["DataConfig", "EvalConfig", "RunConfig", "load_run_config",
           "run_config_from_dict", "to_manifest_toml"]

DATA_SOURCES = ("synthetic-motivating", "synthetic-classification", "csv")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic-motivating"
    csv_path: str = ""
    n_train: int = 40
    n_test: int = 4
    steps: int = 30
    offset_mean: float = 0.0
    offset_spread: float = 2.0
    noise_sd: float = 0.1
    train_range: tuple[float, float] = (0.0, 6.0)
    extrap_range: tuple[float, float] = (6.0, 10.0)
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    windowing: bool = False
    lag: int = 2
    horizon: int = 5

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.source = 'csv' requires data.csv_path")

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            n_train=self.n_train, n_test=self.n_test, steps=self.steps,
            offset_mean=self.offset_mean, offset_spread=self.offset_spread,
            noise_sd=self.noise_sd, train_range=tuple(self.train_range),
            extrap_range=tuple(self.extrap_range), seed=seed)


@dataclass(frozen=True)
class EvalConfig:
    adapt_prefix: float = 0.5  # fraction of each series used for adaptation
    prior_only: bool = False

    def __post_init__(self):
        if not 0.0 <= self.adapt_prefix < 1.0:
            raise ConfigError("eval.adapt_prefix must be a fraction in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "adapt": AdaptationConfig,
    "eval": EvalConfig,
}
_TUPLE_FIELDS = {"embed_hidden", "mean_hidden", "gate_hidden", "train_range",
                 "extrap_range", "split_fractions"}


def _build_section(cls, raw: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"[{section}] {key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top = {}
    sections = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key in ("seed", "output_dir"):
            top[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    if "seed" in top and not isinstance(top["seed"], int):
        raise ConfigError("seed must be an integer")
    # train.seed follows the run seed unless the section pins it explicitly
    if "seed" in top:
        train_cfg = sections.get("train", TrainConfig())
        if "train" not in raw or "seed" not in raw.get("train", {}):
            train_cfg = TrainConfig(**{**asdict(train_cfg), "seed": top["seed"]})
        sections["train"] = train_cfg
    return RunConfig(
        seed=top.get("seed", 0),
        output_dir=str(top.get("output_dir", "runs/out")),
        data=sections.get("data", DataConfig()),
        model=sections.get("model", ModelConfig()),
        train=sections.get("train", TrainConfig()),
        adapt=sections.get("adapt", AdaptationConfig()),
        eval=sections.get("eval", EvalConfig()),
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    return run_config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def to_manifest_toml(cfg: RunConfig, extras: dict | None = None) -> str:
    """Every effective setting, as a re-runnable TOML document."""
    lines = [f"seed = {cfg.seed}", f"output_dir = {_toml_value(cfg.output_dir)}"]
    if extras:
        for key in sorted(extras):
            lines.append(f"# {key}: {extras[key]}")
    for section in ("data", "model", "train", "adapt", "eval"):
        obj = getattr(cfg, section)
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
