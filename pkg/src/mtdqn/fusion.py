"""Multimodal fusion: projection, multi-head self-attention over modality tokens, gated mixing.

The three projected modality vectors form a 3-token sequence. Encoder blocks
are pre-norm and attention-only::

    X <- X + dropout(MHA(LayerNorm(X)))

Per-dimension gates are produced from the flattened contextualized tokens,
one gate head per modality, and normalized across the three modalities by a
softmax, so they always sum to one. The fused vector is the gate-weighted sum
of the contextualized tokens.

Everything is batched internally (leading batch axis); the single-sample
functions wrap the batched ones.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from mtdqn.errors import ConfigurationError, ContractError, DimensionError, StateError
from mtdqn.numerics import ops
from mtdqn.numerics.tensor import Tensor, as_tensor

MODALITIES = ("visual", "text", "audio")
_SHORT = ("v", "t", "a")


@dataclass(frozen=True)
class FusionConfig:
    d_v: int = 12
    d_t: int = 12
    d_a: int = 12
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        for name in ("d_v", "d_t", "d_a", "d_model", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"fusion.{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigurationError("fusion.n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"fusion.d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("fusion.dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def raw_dims(self) -> tuple[int, int, int]:
        return (self.d_v, self.d_t, self.d_a)


@dataclass(frozen=True)
class RawModalFeatures:
    v: np.ndarray
    t: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for name in _SHORT:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def as_batch(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.v[None, :], self.t[None, :], self.a[None, :]


@dataclass
class FusionParams:
    config: FusionConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class AttentionTrace:
    """Attention weights per sample, shaped (batch, layers, heads, 3, 3)."""

    weights: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.weights.shape[1]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[2]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_fusion_params(config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    D = config.d_model
    p: dict[str, Tensor] = {}
    for short, d_in in zip(_SHORT, config.raw_dims):
        p[f"proj.{short}.W"] = Tensor(_uniform(rng, d_in, (d_in, D)), requires_grad=True)
        p[f"proj.{short}.b"] = Tensor(_uniform(rng, d_in, (D,)), requires_grad=True)
    for layer in range(config.n_layers):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[f"enc{layer}.{w}"] = Tensor(_uniform(rng, D, (D, D)), requires_grad=True)
        p[f"enc{layer}.ln.gain"] = Tensor(np.ones(D), requires_grad=True)
        p[f"enc{layer}.ln.bias"] = Tensor(np.zeros(D), requires_grad=True)
    for short in _SHORT:
        p[f"gate.{short}.W"] = Tensor(_uniform(rng, 3 * D, (3 * D, D)), requires_grad=True)
        p[f"gate.{short}.b"] = Tensor(np.zeros(D), requires_grad=True)
    return FusionParams(config, p)


# --- batched building blocks --------------------------------------------------

def _check_raw(batch: Iterable[np.ndarray | Tensor], config: FusionConfig) -> list[Tensor]:
    out = []
    for name, x, d in zip(MODALITIES, batch, config.raw_dims):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != d:
            raise DimensionError(f"{name} features have shape {x.shape}, expected (batch, {d})")
        out.append(x)
    return out


def project_batch(batch, params: FusionParams) -> list[Tensor]:
    """Map each modality batch (B, d_m) to (B, D)."""
    xs = _check_raw(batch, params.config)
    return [
        ops.add_bias(ops.matmul(x, params[f"proj.{s}.W"]), params[f"proj.{s}.b"])
        for x, s in zip(xs, _SHORT)
    ]


def stack_tokens(vectors: list[Tensor]) -> Tensor:
    """(B, D) x 3 -> (B, 3, D)."""
    B, D = vectors[0].shape
    return ops.concat([ops.reshape(v, (B, 1, D)) for v in vectors], axis=1)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V for (n, d) matrices or (B, n, d) stacks.

    Returns the output and the attention weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} disagree on token count")
    if q.shape[-2] < 1:
        raise DimensionError("attention needs at least one token")
    kt_axes = (1, 0) if k.ndim == 2 else (0, 2, 1)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, kt_axes)), 1.0 / np.sqrt(q.shape[-1]))
    weights = ops.rowwise_softmax(scores)
    return ops.matmul(weights, v), weights


def multi_head_batch(tokens: Tensor, params: FusionParams, layer: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention on (B, n, D) tokens; returns output and (B, H, n, n) weights."""
    cfg = params.config
    B, n, D = tokens.shape
    if D != cfg.d_model:
        raise DimensionError(f"tokens have width {D}, expected {cfg.d_model}")
    H, dk = cfg.n_heads, cfg.d_head
    flat = ops.reshape(tokens, (B * n, D))

    def heads(w: str) -> Tensor:
        x = ops.matmul(flat, params[f"enc{layer}.{w}"])
        x = ops.transpose(ops.reshape(x, (B, n, H, dk)), (0, 2, 1, 3))
        return ops.reshape(x, (B * H, n, dk))

    out, weights = scaled_attention(heads("Wq"), heads("Wk"), heads("Wv"))
    out = ops.transpose(ops.reshape(out, (B, H, n, dk)), (0, 2, 1, 3))
    out = ops.matmul(ops.reshape(out, (B * n, D)), params[f"enc{layer}.Wo"])
    return ops.reshape(out, (B, n, D)), weights.data.reshape(B, H, n, n)


def encoder_block(
    tokens: Tensor,
    params: FusionParams,
    layer: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    normed = ops.layer_norm(tokens, params[f"enc{layer}.ln.gain"], params[f"enc{layer}.ln.bias"])
    attended, weights = multi_head_batch(normed, params, layer)
    attended = ops.dropout(attended, params.config.dropout, rng, training)
    return ops.add(tokens, attended), weights


def gates_batch(tokens: Tensor, params: FusionParams) -> Tensor:
    """Gate tensor (B, 3, D); entries along axis 1 sum to one."""
    B, n, D = tokens.shape
    flat = ops.reshape(tokens, (B, n * D))
    w = ops.concat([params[f"gate.{s}.W"] for s in _SHORT], axis=1)
    b = ops.concat([params[f"gate.{s}.b"] for s in _SHORT], axis=0)
    logits = ops.reshape(ops.add_bias(ops.matmul(flat, w), b), (B, 3, D))
    return normalize_gate_logits(logits)


def normalize_gate_logits(logits: Tensor) -> Tensor:
    """Softmax across the modality axis of (B, 3, D) logits."""
    per_dim = ops.rowwise_softmax(ops.transpose(logits, (0, 2, 1)))
    return ops.transpose(per_dim, (0, 2, 1))


def fuse_batch(gates: Tensor, tokens: Tensor) -> Tensor:
    """Sum over modalities of gate * token: (B, 3, D) x 2 -> (B, D)."""
    if gates.shape != tokens.shape:
        raise DimensionError(f"gates {gates.shape} vs tokens {tokens.shape}")
    return ops.reduce_sum(ops.mul(gates, tokens), axis=1)


def fusion_forward_batch(
    batch,
    params: FusionParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Fused vectors (B, D) and the attention trace for a batch of raw features."""
    tokens = stack_tokens(project_batch(batch, params))
    traces = []
    for layer in range(params.config.n_layers):
        tokens, w = encoder_block(tokens, params, layer, training, rng)
        traces.append(w)
    B = tokens.shape[0]
    if traces:
        trace = np.stack(traces, axis=1)
    else:
        trace = np.zeros((B, 0, params.config.n_heads, 3, 3))
    fused = fuse_batch(gates_batch(tokens, params), tokens)
    return fused, AttentionTrace(trace)


# --- single-sample interface --------------------------------------------------

def project_modalities(raw: RawModalFeatures, params: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    D = params.config.d_model
    outs = project_batch(raw.as_batch(), params)
    return tuple(ops.reshape(o, (D,)) for o in outs)


def multi_head(tokens: Tensor, params: FusionParams, layer: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention on a (3, D) token matrix; weights are (H, 3, 3)."""
    tokens = as_tensor(tokens)
    n, D = tokens.shape
    out, weights = multi_head_batch(ops.reshape(tokens, (1, n, D)), params, layer)
    return ops.reshape(out, (n, D)), weights[0]


def modality_gates(vp: Tensor, tp: Tensor, ap: Tensor, params: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    D = params.config.d_model
    for name, x in zip(MODALITIES, (vp, tp, ap)):
        if as_tensor(x).shape != (D,):
            raise DimensionError(f"{name} vector has shape {as_tensor(x).shape}, expected ({D},)")
    tokens = stack_tokens([ops.reshape(x, (1, D)) for x in (vp, tp, ap)])
    g = gates_batch(tokens, params)
    return tuple(ops.reshape(ops.take(g, [m], axis=1), (D,)) for m in range(3))


def gated_fuse(gates, vp, tp, ap, atol: float = 1e-9) -> Tensor:
    """f = g_v * v' + g_t * t' + g_a * a' for gates that sum to one per dimension."""
    gs = [as_tensor(g) for g in gates]
    xs = [as_tensor(x) for x in (vp, tp, ap)]
    shape = xs[0].shape
    if any(t.shape != shape for t in gs + xs):
        raise DimensionError(f"gated_fuse shapes differ: {[t.shape for t in gs + xs]}")
    total = sum(g.data for g in gs)
    if not np.allclose(total, 1.0, rtol=0.0, atol=atol):
        raise ContractError(f"gates do not sum to one (max deviation {np.max(np.abs(total - 1.0)):.3g})")
    out = ops.mul(gs[0], xs[0])
    for g, x in zip(gs[1:], xs[1:]):
        out = ops.add(out, ops.mul(g, x))
    return out


def fusion_forward(
    raw: RawModalFeatures,
    params: FusionParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionTrace]:
    fused, trace = fusion_forward_batch(raw.as_batch(), params, training, rng)
    return ops.reshape(fused, (params.config.d_model,)), trace


# --- export -------------------------------------------------------------------

def attention_rows(trace: AttentionTrace | None, sample: int = 0) -> list[tuple[int, int, str, str, float]]:
    if trace is None:
        raise StateError("no attention trace recorded; run a forward pass first")
    w = trace.weights[sample]
    rows = []
    for layer in range(w.shape[0]):
        for head in range(w.shape[1]):
            for i, src in enumerate(MODALITIES):
                for j, dst in enumerate(MODALITIES):
                    rows.append((layer, head, src, dst, float(w[layer, head, i, j])))
    return rows


def export_attention(trace: AttentionTrace | None, sample: int = 0) -> str:
    """CSV text with columns layer, head, from_modality, to_modality, weight."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "head", "from_modality", "to_modality", "weight"])
    for layer, head, src, dst, weight in attention_rows(trace, sample):
        writer.writerow([layer, head, src, dst, repr(weight)])
    return buf.getvalue()


# --- concatenation substitute used by ablations and baselines -----------------

def init_concat_params(config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    """Projections plus one linear map over the concatenated projections."""
    D = config.d_model
    p: dict[str, Tensor] = {}
    for short, d_in in zip(_SHORT, config.raw_dims):
        p[f"proj.{short}.W"] = Tensor(_uniform(rng, d_in, (d_in, D)), requires_grad=True)
        p[f"proj.{short}.b"] = Tensor(_uniform(rng, d_in, (D,)), requires_grad=True)
    p["concat.W"] = Tensor(_uniform(rng, 3 * D, (3 * D, D)), requires_grad=True)
    p["concat.b"] = Tensor(np.zeros(D), requires_grad=True)
    return FusionParams(config, p)


def concat_forward_batch(batch, params: FusionParams) -> Tensor:
    """(B, D) linear map of [v'; t'; a'], with no attention and no gates."""
    joined = ops.concat(project_batch(batch, params), axis=1)
    return ops.add_bias(ops.matmul(joined, params["concat.W"]), params["concat.b"])
