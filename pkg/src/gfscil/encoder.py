"""Two-layer multi-head graph-attention encoder with Adam and EMA utilities.

Layer 1 concatenates head outputs and applies ReLU + dropout; layer 2
averages head outputs to produce the node embeddings. An optional linear
projection head supports frozen-backbone variants.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParamStore, Tape
from .graph import SparseGraph

CHECKPOINT_MAGIC = b"GFSCILP1"


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int
    hidden: int = 16
    heads: int = 12
    out_dim: int = 16
    dropout: float = 0.5
    leaky_slope: float = 0.2
    proj_head: bool = False

    def __post_init__(self) -> None:
        if min(self.in_dim, self.hidden, self.heads, self.out_dim) <= 0:
            raise ValueError("encoder dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParamStore:
    """Glorot-uniform weights and attention vectors, zero biases."""
    params = ParamStore()
    layer_dims = [(cfg.in_dim, cfg.hidden), (cfg.hidden * cfg.heads, cfg.out_dim)]
    for layer, (d_in, d_out) in enumerate(layer_dims):
        for head in range(cfg.heads):
            prefix = f"layer{layer}.head{head}"
            params.add(f"{prefix}.W", _glorot(rng, d_in, d_out, (d_in, d_out)))
            params.add(f"{prefix}.a_src", _glorot(rng, d_out, 1, (d_out,)))
            params.add(f"{prefix}.a_dst", _glorot(rng, d_out, 1, (d_out,)))
            params.add(f"{prefix}.b", np.zeros(d_out))
    if cfg.proj_head:
        params.add("proj.W", np.eye(cfg.out_dim))
        params.add("proj.b", np.zeros(cfg.out_dim))
    return params


def add_projection_head(params: ParamStore, cfg: EncoderConfig) -> tuple[ParamStore, EncoderConfig]:
    """Append an identity-initialized linear head; embeddings are unchanged until it trains."""
    if cfg.proj_head:
        raise ValueError("projection head already present")
    out = params.copy()
    out.add("proj.W", np.eye(cfg.out_dim))
    out.add("proj.b", np.zeros(cfg.out_dim))
    return out, replace(cfg, proj_head=True)


def projection_param_names(params: ParamStore) -> list[str]:
    return [name for name in params.names() if name.startswith("proj.")]


def _attention_layer(
    tape: Tape,
    g: SparseGraph,
    h: int,
    params: ParamStore,
    cfg: EncoderConfig,
    layer: int,
) -> list[int]:
    outputs = []
    for head in range(cfg.heads):
        prefix = f"layer{layer}.head{head}"
        w = tape.param(f"{prefix}.W", params[f"{prefix}.W"])
        a_src = tape.param(f"{prefix}.a_src", params[f"{prefix}.a_src"])
        a_dst = tape.param(f"{prefix}.a_dst", params[f"{prefix}.a_dst"])
        bias = tape.param(f"{prefix}.b", params[f"{prefix}.b"])
        projected = tape.matmul(h, w)
        src_scores = tape.matmul(projected, a_src)
        dst_scores = tape.matmul(projected, a_dst)
        logits = tape.leaky_relu(tape.edge_logits(src_scores, dst_scores, g), cfg.leaky_slope)
        alpha = tape.segment_softmax(logits, g)
        aggregated = tape.segment_weighted_sum(alpha, projected, g)
        outputs.append(tape.add_bias(aggregated, bias))
    return outputs


def encode(
    tape: Tape,
    g: SparseGraph,
    features: np.ndarray,
    params: ParamStore,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> int:
    """Build the encoder forward pass on `tape`; returns the embedding node (n, out_dim).

    Train mode draws a dropout mask for the layer-1 activations from
    `rng`; eval mode applies no dropout and is deterministic.
    """
    if features.shape != (g.n, cfg.in_dim):
        raise ValueError(
            f"feature matrix {features.shape} does not match graph ({g.n} nodes, in_dim {cfg.in_dim})"
        )
    x = tape.constant(features)
    hidden = tape.relu(tape.concat_cols(_attention_layer(tape, g, x, params, cfg, layer=0)))
    if train and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode encoding requires an rng for the dropout mask")
        keep = 1.0 - cfg.dropout
        mask = rng.random(tape.value(hidden).shape) < keep
        hidden = tape.dropout(hidden, mask, keep)
    out = tape.mean_stack(_attention_layer(tape, g, hidden, params, cfg, layer=1))
    if cfg.proj_head:
        w = tape.param("proj.W", params["proj.W"])
        b = tape.param("proj.b", params["proj.b"])
        out = tape.add_bias(tape.matmul(out, w), b)
    return out


def embed(
    g: SparseGraph, features: np.ndarray, params: ParamStore, cfg: EncoderConfig
) -> np.ndarray:
    """Deterministic eval-mode embeddings as a plain array."""
    tape = Tape()
    return tape.value(encode(tape, g, features, params, cfg, train=False))


def ema_update(prev: ParamStore, new: ParamStore, beta: float) -> ParamStore:
    """Elementwise convex blend beta * prev + (1 - beta) * new."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if not prev.same_layout(new):
        raise ValueError("parameter layouts differ")
    out = ParamStore()
    for name, value in prev.items():
        out.add(name, beta * value + (1.0 - beta) * new[name])
    return out


@dataclass
class AdamState:
    """First/second moment accumulators; one slot per parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(val) for k, val in params.items()},
            v={k: np.zeros_like(val) for k, val in params.items()},
        )


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.01,
    weight_decay: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    trainable: set[str] | None = None,
) -> ParamStore:
    """One Adam update with decoupled weight decay; `state` is mutated in place.

    `trainable` restricts the update to a subset of parameter names
    (frozen-backbone variants); everything else is returned unchanged.
    """
    state.step += 1
    t = state.step
    out = ParamStore()
    for name, theta in params.items():
        g = grads.get(name)
        if g is None or (trainable is not None and name not in trainable):
            out.add(name, theta)
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {t}")
        if name not in state.m:  # parameters appended after state creation (projection head)
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        out.add(name, theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * theta)
    return out


def save_params(params: ParamStore, path) -> None:
    """Checkpoint: magic, u32 header length, JSON header, little-endian float32 payload."""
    header = {"tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()]}
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, value in params.items():
            if not np.all(np.isfinite(value)):
                raise FloatingPointError("refusing to checkpoint non-finite parameters")
            fh.write(value.astype("<f4").tobytes())


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint: {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len))
        params = ParamStore()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(count * 4), dtype="<f4", count=count)
            value = raw.reshape(shape).astype(np.float64)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"non-finite values in checkpoint tensor {entry['name']!r}")
            params.add(entry["name"], value)
    return params
