"""Key-value text serialization for models and dataset manifests.

Format: one ``key=value`` per line, ``#`` comment lines allowed. Arrays are
written as ``shape:v0,v1,...`` in row-major order with ``repr`` floats, so
loading reproduces every bit and re-serializing is byte-identical. Keys are
emitted in a fixed order (patients sorted) which makes whole files
deterministic for fixed inputs. Files are written atomically (temp file in
the same directory, then rename).
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .data import DatasetManifest
from .errors import DataError
from .kernel import KernelParams
from .model import DmeGpModel, ModelConfig
from .nn import NetworkParams, net_arrays, replace_net_arrays

__all__ = [
    "save_model",
    "load_model",
    "model_to_text",
    "manifest_to_text",
    "save_manifest",
    "load_manifest",
    "atomic_write_text",
]

FORMAT_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _fmt_array(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=np.float64)
    shape = "x".join(str(n) for n in a.shape) if a.ndim else "scalar"
    return f"{shape}:" + ",".join(_fmt_float(v) for v in a.ravel())


def _parse_array(s: str) -> np.ndarray:
    shape_s, _, data = s.partition(":")
    vals = np.array([float(v) for v in data.split(",")] if data else [], dtype=np.float64)
    if shape_s == "scalar":
        return vals.reshape(())
    shape = tuple(int(n) for n in shape_s.split("x"))
    return vals.reshape(shape)


def _net_lines(prefix: str, net: NetworkParams, out: list[str]) -> None:
    arrays = net_arrays(net)
    out.append(f"{prefix}.count={len(arrays)}")
    for i, a in enumerate(arrays):
        out.append(f"{prefix}.{i}={_fmt_array(a)}")


def _kp_lines(prefix: str, kp: KernelParams, out: list[str]) -> None:
    out.append(f"{prefix}.log_lengthscales={_fmt_array(kp.log_lengthscales)}")
    out.append(f"{prefix}.log_signal_variance={_fmt_float(kp.log_signal_variance)}")
    out.append(f"{prefix}.log_noise_variance={_fmt_float(kp.log_noise_variance)}")


def _check_id(pid: str) -> str:
    if any(c in pid for c in ",=\n"):
        raise DataError(f"patient id {pid!r} contains characters the key-value format reserves")
    return pid


def model_to_text(model: DmeGpModel, manifest: DatasetManifest | None = None) -> str:
    for pid in list(model.kernels) + list(model.embeddings):
        _check_id(pid)
    cfg = model.config
    lines = [
        "# dmegp model file",
        f"format_version={FORMAT_VERSION}",
        f"config.sharing={cfg.sharing}",
        f"config.likelihood={cfg.likelihood}",
        f"config.mean_kind={cfg.mean_kind}",
        f"config.embed_dim={cfg.embed_dim}",
        "config.embed_hidden=" + ",".join(str(w) for w in cfg.embed_hidden),
        "config.mean_hidden=" + ",".join(str(w) for w in cfg.mean_hidden),
        f"config.n_experts={cfg.n_experts}",
        "config.gate_hidden=" + ",".join(str(w) for w in cfg.gate_hidden),
        f"input_dim={model.shared.arch.input_dim}",
        f"init_seed={model.init_seed}",
    ]
    _net_lines("net.shared", model.shared, lines)
    lines.append("kernels=" + ",".join(sorted(model.kernels)))
    for pid in sorted(model.kernels):
        _kp_lines(f"kernel.{pid}", model.kernels[pid], lines)
    lines.append("embeddings=" + ",".join(sorted(model.embeddings)))
    for pid in sorted(model.embeddings):
        _net_lines(f"net.patient.{pid}", model.embeddings[pid], lines)
    if manifest is not None:
        lines.append("normalization=present")
        lines.extend(manifest_to_text(manifest).splitlines())
    return "\n".join(lines) + "\n"


def _parse_kv(text: str) -> dict[str, str]:
    kv: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"malformed line in key-value file: {raw!r}")
        kv[key.strip()] = value
    return kv


def _read_net(kv: dict[str, str], prefix: str, proto: NetworkParams) -> NetworkParams:
    count = int(kv[f"{prefix}.count"])
    arrays = [_parse_array(kv[f"{prefix}.{i}"]) for i in range(count)]
    return replace_net_arrays(proto, arrays)


def _read_kp(kv: dict[str, str], prefix: str) -> KernelParams:
    return KernelParams(
        log_lengthscales=_parse_array(kv[f"{prefix}.log_lengthscales"]),
        log_signal_variance=float(kv[f"{prefix}.log_signal_variance"]),
        log_noise_variance=float(kv[f"{prefix}.log_noise_variance"]),
    )


def _tuple_of_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",")) if s else ()


def load_model(path) -> tuple[DmeGpModel, DatasetManifest | None]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    kv = _parse_kv(text)
    if int(kv.get("format_version", "-1")) != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {kv.get('format_version')!r}")
    cfg = ModelConfig(
        sharing=kv["config.sharing"],
        likelihood=kv["config.likelihood"],
        mean_kind=kv["config.mean_kind"],
        embed_dim=int(kv["config.embed_dim"]),
        embed_hidden=_tuple_of_ints(kv["config.embed_hidden"]),
        mean_hidden=_tuple_of_ints(kv["config.mean_hidden"]),
        n_experts=int(kv["config.n_experts"]),
        gate_hidden=_tuple_of_ints(kv["config.gate_hidden"]),
    )
    from .model import new_model  # proto with the right container structure

    input_dim = int(kv["input_dim"])
    init_seed = int(kv["init_seed"])
    model = new_model(cfg, input_dim=input_dim, seed=init_seed)
    model.shared = _read_net(kv, "net.shared", model.shared)
    model.kernels = {}
    for pid in (p for p in kv["kernels"].split(",") if p):
        model.kernels[pid] = _read_kp(kv, f"kernel.{pid}")
    model.embeddings = {}
    for pid in (p for p in kv.get("embeddings", "").split(",") if p):
        model.embeddings[pid] = _read_net(kv, f"net.patient.{pid}", model.shared)
    manifest = None
    if kv.get("normalization") == "present":
        manifest = _manifest_from_kv(kv)
    return model, manifest


def save_model(path, model: DmeGpModel, manifest: DatasetManifest | None = None) -> None:
    atomic_write_text(path, model_to_text(model, manifest))


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

def manifest_to_text(manifest: DatasetManifest) -> str:
    lines = [
        "# dmegp dataset manifest",
        f"manifest.feature_count={manifest.feature_count}",
        f"manifest.task={manifest.task}",
        f"manifest.means={_fmt_array(manifest.means)}",
        f"manifest.stds={_fmt_array(manifest.stds)}",
        "manifest.patients=" + ",".join(sorted(manifest.split)),
    ]
    for pid in sorted(manifest.split):
        lines.append(f"manifest.split.{pid}={manifest.split[pid]}")
    return "\n".join(lines) + "\n"


def _manifest_from_kv(kv: dict[str, str]) -> DatasetManifest:
    split = {}
    for pid in (p for p in kv.get("manifest.patients", "").split(",") if p):
        split[pid] = kv[f"manifest.split.{pid}"]
    return DatasetManifest(
        feature_count=int(kv["manifest.feature_count"]),
        means=_parse_array(kv["manifest.means"]),
        stds=_parse_array(kv["manifest.stds"]),
        task=kv["manifest.task"],
        split=split,
    )


def save_manifest(path, manifest: DatasetManifest) -> None:
    atomic_write_text(path, manifest_to_text(manifest))


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        kv = _parse_kv(fh.read())
    return _manifest_from_kv(kv)
