"""Shared deep components with hand-derived reverse-mode gradients.

Two networks are shared across all patients: the embedding function that
maps raw inputs x_t to vectors h_t (either a per-step MLP or a vanilla
tanh RNN run along the series), and the mean function that maps each h_t to
a scalar trend value. An optional gated mixture replaces the single mean
net with several experts weighted by a softmax gate. Backpropagation,
including backpropagation through time for the recurrent cell, is written
out explicitly: the training objective's upstream derivatives arrive both
through the mean values and directly through the embeddings (via the
kernel), and ``backprop_series`` combines the two paths.

Bias terms are always present even where a purely notational description
would drop them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, TraceMissing

__all__ = [
    "Architecture",
    "Mlp",
    "RnnCell",
    "NetworkParams",
    "NetworkGradients",
    "Embedding",
    "init_network",
    "embed_series",
    "mean_series",
    "mixture_mean_series",
    "backprop_series",
    "net_arrays",
    "grad_arrays",
    "replace_net_arrays",
]

CELL_KINDS = ("mlp", "rnn")


@dataclass(frozen=True)
class Architecture:
    """Layer widths and cell kind for the shared networks.

    ``cell`` selects how embeddings are produced: "mlp" applies a feed-
    forward net independently per step, "rnn" runs a vanilla tanh cell along
    the sequence (state dimension == embed_dim). ``n_experts`` >= 2 turns
    the mean function into a softmax-gated mixture.
    """

    input_dim: int
    embed_dim: int = 8
    cell: str = "mlp"
    embed_hidden: tuple[int, ...] = (8,)
    mean_hidden: tuple[int, ...] = (8,)
    n_experts: int = 1
    gate_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 1:
            raise DimensionMismatch("input_dim and embed_dim must be positive")
        if self.cell not in CELL_KINDS:
            raise DimensionMismatch(f"unknown cell kind {self.cell!r}")
        if self.n_experts < 1:
            raise DimensionMismatch("n_experts must be >= 1")


@dataclass
class Mlp:
    """Fully-connected layers; tanh on hidden layers, linear output."""

    weights: list[np.ndarray]  # layer l: (out_l, in_l)
    biases: list[np.ndarray]  # layer l: (out_l,)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class RnnCell:
    """Vanilla recurrent cell: h_t = tanh(w_xh x_t + w_hh h_{t-1} + bias)."""

    w_xh: np.ndarray  # (E, D)
    w_hh: np.ndarray  # (E, E)
    bias: np.ndarray  # (E,)


@dataclass
class NetworkParams:
    """All shared deep parameters: embedding net, mean net(s), gate."""

    arch: Architecture
    embed_rnn: RnnCell | None
    embed_mlp: Mlp | None
    means: list[Mlp]
    gate: Mlp | None = None


@dataclass
class NetworkGradients:
    """Gradients in containers mirroring NetworkParams."""

    embed_rnn: RnnCell | None
    embed_mlp: Mlp | None
    means: list[Mlp]
    gate: Mlp | None = None


@dataclass
class Embedding:
    """Per-step embedding vectors plus the forward trace for backprop."""

    vectors: np.ndarray  # (T, E)
    cell: str
    inputs: np.ndarray | None = None  # (T, D)
    mlp_trace: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    def without_trace(self) -> "Embedding":
        return Embedding(vectors=self.vectors, cell=self.cell)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _init_mlp(widths: list[int], rng: np.random.Generator) -> Mlp:
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(weights=ws, biases=bs)


def init_network(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    """Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    if arch.cell == "rnn":
        d, e = arch.input_dim, arch.embed_dim
        a_x = np.sqrt(6.0 / (d + e))
        a_h = np.sqrt(6.0 / (e + e))
        embed_rnn = RnnCell(
            w_xh=rng.uniform(-a_x, a_x, size=(e, d)),
            w_hh=rng.uniform(-a_h, a_h, size=(e, e)),
            bias=np.zeros(e),
        )
        embed_mlp = None
    else:
        embed_rnn = None
        widths = [arch.input_dim, *arch.embed_hidden, arch.embed_dim]
        embed_mlp = _init_mlp(widths, rng)
    mean_widths = [arch.embed_dim, *arch.mean_hidden, 1]
    means = [_init_mlp(mean_widths, rng) for _ in range(arch.n_experts)]
    gate = None
    if arch.n_experts >= 2:
        gate = _init_mlp([arch.embed_dim, *arch.gate_hidden, arch.n_experts], rng)
    return NetworkParams(arch=arch, embed_rnn=embed_rnn, embed_mlp=embed_mlp,
                         means=means, gate=gate)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (output (T, out), activations [input, layer1, ..., output])."""
    if x.shape[1] != mlp.in_dim:
        raise DimensionMismatch(
            f"mlp expects input width {mlp.in_dim}, got {x.shape[1]}")
    acts = [x]
    n_layers = len(mlp.weights)
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if l == n_layers - 1 else np.tanh(z))
    return acts[-1], acts


def _mlp_backward(mlp: Mlp, acts: list[np.ndarray], delta: np.ndarray) -> tuple[Mlp, np.ndarray]:
    """Backward through an MLP given upstream (T, out); returns (grads, dX)."""
    gws = [np.zeros_like(w) for w in mlp.weights]
    gbs = [np.zeros_like(b) for b in mlp.biases]
    for l in reversed(range(len(mlp.weights))):
        gws[l] = delta.T @ acts[l]
        gbs[l] = delta.sum(axis=0)
        delta = delta @ mlp.weights[l]
        if l > 0:  # acts[l] is a tanh output for hidden layers
            delta = delta * (1.0 - acts[l] ** 2)
    return Mlp(weights=gws, biases=gbs), delta


def embed_series(x_seq: np.ndarray, params: NetworkParams) -> Embedding:
    """Embed a (T, D) input sequence into (T, E) vectors.

    The rnn cell starts from a zero state and carries it along the sequence;
    the mlp cell treats steps independently. The forward trace lives on the
    returned Embedding so gradients can be taken later.
    """
    x = np.atleast_2d(np.asarray(x_seq, dtype=np.float64))
    if x.shape[1] != params.arch.input_dim:
        raise DimensionMismatch(
            f"expected input dim {params.arch.input_dim}, got {x.shape[1]}")
    if params.arch.cell == "rnn":
        cell = params.embed_rnn
        t_len, e = x.shape[0], params.arch.embed_dim
        h = np.zeros(e)
        out = np.empty((t_len, e))
        for t in range(t_len):
            h = np.tanh(cell.w_xh @ x[t] + cell.w_hh @ h + cell.bias)
            out[t] = h
        return Embedding(vectors=out, cell="rnn", inputs=x)
    out, acts = _mlp_forward(params.embed_mlp, x)
    return Embedding(vectors=out, cell="mlp", inputs=x, mlp_trace=acts)


def mean_series(emb: Embedding, params: NetworkParams) -> np.ndarray:
    """Mean-function value at every step: (T,)."""
    out, _ = _mlp_forward(params.means[0], emb.vectors)
    return out[:, 0]


def _gate_probs(params: NetworkParams, h: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    logits, acts = _mlp_forward(params.gate, h)
    # max-subtraction keeps the normalized exponential stable
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True), acts


def mixture_mean_series(emb: Embedding, params: NetworkParams) -> np.ndarray:
    """Gated mixture mean: per step, softmax-weighted sum of expert means."""
    if params.gate is None:
        return mean_series(emb, params)
    if params.gate.out_dim != len(params.means):
        raise DimensionMismatch("gate output width must equal the expert count")
    h = emb.vectors
    probs, _ = _gate_probs(params, h)
    experts = np.column_stack([_mlp_forward(m, h)[0][:, 0] for m in params.means])
    return (probs * experts).sum(axis=1)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _zeros_mlp(mlp: Mlp) -> Mlp:
    return Mlp(weights=[np.zeros_like(w) for w in mlp.weights],
               biases=[np.zeros_like(b) for b in mlp.biases])


def zeros_like_grads(params: NetworkParams) -> NetworkGradients:
    return NetworkGradients(
        embed_rnn=None if params.embed_rnn is None else RnnCell(
            w_xh=np.zeros_like(params.embed_rnn.w_xh),
            w_hh=np.zeros_like(params.embed_rnn.w_hh),
            bias=np.zeros_like(params.embed_rnn.bias)),
        embed_mlp=None if params.embed_mlp is None else _zeros_mlp(params.embed_mlp),
        means=[_zeros_mlp(m) for m in params.means],
        gate=None if params.gate is None else _zeros_mlp(params.gate),
    )


def backprop_series(
    emb: Embedding,
    upstream_mean_grads: np.ndarray,
    upstream_embedding_grads: np.ndarray,
    params: NetworkParams,
) -> NetworkGradients:
    """Exact gradients of sum_t (a_t * mu_t + <b_t, h_t>) w.r.t. all weights.

    ``upstream_mean_grads`` a is (T,), ``upstream_embedding_grads`` b is
    (T, E). The mean path is re-run forward here (it is cheap); the
    embedding trace must still be attached or TraceMissing is raised. When
    the params hold a gated mixture, the mean path is the mixture mean.
    """
    if emb.inputs is None or (emb.cell == "mlp" and emb.mlp_trace is None):
        raise TraceMissing("embedding lost its forward trace")
    a = np.asarray(upstream_mean_grads, dtype=np.float64)
    b = np.asarray(upstream_embedding_grads, dtype=np.float64)
    t_len, e = emb.vectors.shape
    if a.shape != (t_len,) or b.shape != (t_len, e):
        raise DimensionMismatch("upstream gradient shapes do not match the trace")

    grads = zeros_like_grads(params)
    g_h = b.copy()  # total gradient flowing into each h_t

    if np.any(a != 0.0):
        h = emb.vectors
        if params.gate is not None:
            probs, gate_acts = _gate_probs(params, h)
            expert_acts = []
            expert_out = np.empty((t_len, len(params.means)))
            for j, m in enumerate(params.means):
                out, acts = _mlp_forward(m, h)
                expert_out[:, j] = out[:, 0]
                expert_acts.append(acts)
            mu = (probs * expert_out).sum(axis=1)
            for j, m in enumerate(params.means):
                delta = (a * probs[:, j])[:, None]
                g, dh = _mlp_backward(m, expert_acts[j], delta)
                grads.means[j] = g
                g_h += dh
            # d mu / d logit_k = p_k (expert_k - mu)
            gate_delta = a[:, None] * probs * (expert_out - mu[:, None])
            g, dh = _mlp_backward(params.gate, gate_acts, gate_delta)
            grads.gate = g
            g_h += dh
        else:
            _, acts = _mlp_forward(params.means[0], h)
            g, dh = _mlp_backward(params.means[0], acts, a[:, None])
            grads.means[0] = g
            g_h += dh

    if emb.cell == "mlp":
        g, _ = _mlp_backward(params.embed_mlp, emb.mlp_trace, g_h)
        grads.embed_mlp = g
    else:
        cell = params.embed_rnn
        h = emb.vectors
        x = emb.inputs
        gw_xh = np.zeros_like(cell.w_xh)
        gw_hh = np.zeros_like(cell.w_hh)
        gb = np.zeros_like(cell.bias)
        carry = np.zeros(e)
        for t in range(t_len - 1, -1, -1):
            dz = (g_h[t] + carry) * (1.0 - h[t] ** 2)
            gw_xh += np.outer(dz, x[t])
            h_prev = h[t - 1] if t > 0 else np.zeros(e)
            gw_hh += np.outer(dz, h_prev)
            gb += dz
            carry = cell.w_hh.T @ dz
        grads.embed_rnn = RnnCell(w_xh=gw_xh, w_hh=gw_hh, bias=gb)
    return grads


# ---------------------------------------------------------------------------
# flat views (optimizer / serialization order)
# ---------------------------------------------------------------------------

def _mlp_arrays(mlp: Mlp) -> list[np.ndarray]:
    out = []
    for w, b in zip(mlp.weights, mlp.biases):
        out.extend((w, b))
    return out


def net_arrays(params: NetworkParams) -> list[np.ndarray]:
    """Canonical flat ordering of all parameter arrays."""
    out: list[np.ndarray] = []
    if params.embed_rnn is not None:
        out.extend((params.embed_rnn.w_xh, params.embed_rnn.w_hh, params.embed_rnn.bias))
    if params.embed_mlp is not None:
        out.extend(_mlp_arrays(params.embed_mlp))
    for m in params.means:
        out.extend(_mlp_arrays(m))
    if params.gate is not None:
        out.extend(_mlp_arrays(params.gate))
    return out


def grad_arrays(grads: NetworkGradients) -> list[np.ndarray]:
    """Same ordering as net_arrays, for gradient containers."""
    out: list[np.ndarray] = []
    if grads.embed_rnn is not None:
        out.extend((grads.embed_rnn.w_xh, grads.embed_rnn.w_hh, grads.embed_rnn.bias))
    if grads.embed_mlp is not None:
        out.extend(_mlp_arrays(grads.embed_mlp))
    for m in grads.means:
        out.extend(_mlp_arrays(m))
    if grads.gate is not None:
        out.extend(_mlp_arrays(grads.gate))
    return out


def replace_net_arrays(params: NetworkParams, arrays: list[np.ndarray]) -> NetworkParams:
    """Rebuild a NetworkParams from arrays in net_arrays order."""
    it = iter(arrays)

    def take_mlp(proto: Mlp) -> Mlp:
        ws, bs = [], []
        for _ in proto.weights:
            ws.append(next(it))
            bs.append(next(it))
        return Mlp(weights=ws, biases=bs)

    embed_rnn = None
    embed_mlp = None
    if params.embed_rnn is not None:
        embed_rnn = RnnCell(w_xh=next(it), w_hh=next(it), bias=next(it))
    if params.embed_mlp is not None:
        embed_mlp = take_mlp(params.embed_mlp)
    means = [take_mlp(m) for m in params.means]
    gate = take_mlp(params.gate) if params.gate is not None else None
    leftovers = sum(1 for _ in it)
    if leftovers:
        raise DimensionMismatch(f"{leftovers} unused arrays in replacement")
    return NetworkParams(arch=params.arch, embed_rnn=embed_rnn, embed_mlp=embed_mlp,
                         means=means, gate=gate)
