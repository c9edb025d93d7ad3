"""Timestamped interaction graph, windowed graph convolution and temporal attention.

Node ids are global: users occupy ``[0, N)`` and videos ``[N, N + M)``.
Each of the ``T`` windows preceding a query time yields a static snapshot
that is convolved independently from the base node features; the query
node's final-layer embeddings across windows form its timeline, which a
learned attention score collapses into one sequence embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mtdqn.errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    ValidationError,
)
from mtdqn.numerics import ops
from mtdqn.numerics.tensor import Tensor, as_tensor

BEHAVIORS = ("watch", "like", "comment", "share", "follow")
BEHAVIOR_WEIGHTS = {"like": 1.0, "comment": 1.5, "share": 2.0, "follow": 1.0}


def behavior_weight(behavior: str, watch_fraction: float = 1.0) -> float:
    """Edge intensity for a behavior; a watch is weighted by the fraction watched."""
    if behavior == "watch":
        return float(watch_fraction)
    try:
        return BEHAVIOR_WEIGHTS[behavior]
    except KeyError:
        raise ValidationError(f"unknown behavior {behavior!r}") from None


@dataclass(frozen=True)
class InteractionEvent:
    actor: int
    target: int
    behavior: str
    timestamp: float
    weight: float

    @property
    def target_kind(self) -> str:
        return "user" if self.behavior == "follow" else "video"


@dataclass(frozen=True)
class InteractionGraph:
    """Directed multigraph; edge arrays are sorted by (timestamp, src, dst, weight)."""

    n_users: int
    n_videos: int
    src: np.ndarray
    dst: np.ndarray
    timestamp: np.ndarray
    weight: np.ndarray
    is_follow: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_videos

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def video_node(self, video: int) -> int:
        return self.n_users + video


def build_graph(events: Iterable[InteractionEvent], n_users: int, n_videos: int) -> InteractionGraph:
    """Ingest events as multi-edges; rejects unresolved ids with the event index."""
    if n_users < 1 or n_videos < 0:
        raise ValidationError(f"need n_users >= 1 and n_videos >= 0, got {n_users}, {n_videos}")
    src, dst, ts, ws, fol = [], [], [], [], []
    for i, e in enumerate(events):
        if e.behavior not in BEHAVIORS:
            raise ValidationError(f"event {i}: unknown behavior {e.behavior!r}")
        if not 0 <= e.actor < n_users:
            raise ValidationError(f"event {i}: actor {e.actor} outside [0, {n_users})")
        bound = n_users if e.behavior == "follow" else n_videos
        if not 0 <= e.target < bound:
            raise ValidationError(f"event {i}: {e.target_kind} target {e.target} outside [0, {bound})")
        if not (np.isfinite(e.timestamp) and np.isfinite(e.weight)) or e.weight < 0:
            raise ValidationError(f"event {i}: timestamp and weight must be finite, weight >= 0")
        src.append(e.actor)
        dst.append(e.target if e.behavior == "follow" else n_users + e.target)
        ts.append(e.timestamp)
        ws.append(e.weight)
        fol.append(e.behavior == "follow")
    src_a = np.asarray(src, dtype=np.int64)
    dst_a = np.asarray(dst, dtype=np.int64)
    ts_a = np.asarray(ts, dtype=np.float64)
    ws_a = np.asarray(ws, dtype=np.float64)
    fol_a = np.asarray(fol, dtype=bool)
    order = np.lexsort((ws_a, dst_a, src_a, ts_a))
    return InteractionGraph(
        n_users, n_videos, src_a[order], dst_a[order], ts_a[order], ws_a[order], fol_a[order]
    )


def snapshot(
    graph: InteractionGraph, t_start: float, t_end: float, include_follow: bool = True
) -> np.ndarray:
    """Dense weighted adjacency A[u, v] summed over edges with t_start <= t < t_end."""
    if not t_start < t_end:
        raise ValidationError(f"window [{t_start}, {t_end}) is empty or inverted")
    lo = np.searchsorted(graph.timestamp, t_start, side="left")
    hi = np.searchsorted(graph.timestamp, t_end, side="left")
    sel = slice(lo, hi)
    src, dst, w = graph.src[sel], graph.dst[sel], graph.weight[sel]
    if not include_follow:
        keep = ~graph.is_follow[sel]
        src, dst, w = src[keep], dst[keep], w[keep]
    adj = np.zeros((graph.n_nodes, graph.n_nodes))
    np.add.at(adj, (src, dst), w)
    return adj


def normalized_propagation(adj: np.ndarray, reverse_edges: bool = False, self_loops: bool = False) -> np.ndarray:
    """Matrix M with M[v, u] = P[u, v] / sqrt(deg_out(u) * deg_in(v)).

    ``P`` is the snapshot adjacency, optionally symmetrized and given unit
    self-loops. Degrees are weighted; a zero degree on either side leaves the
    normalizer at 1.
    """
    p = adj + adj.T if reverse_edges else adj.copy()
    if self_loops:
        p = p + np.eye(p.shape[0])
    d_out = p.sum(axis=1)
    d_in = p.sum(axis=0)
    c = np.sqrt(np.outer(d_out, d_in))
    c[c == 0] = 1.0
    return (p / c).T


@dataclass(frozen=True)
class TgnnConfig:
    widths: tuple[int, ...] = (16,)
    d_g: int = 16
    n_windows: int = 6
    window_len: float = 1.0
    include_follow: bool = True
    reverse_edges: bool = True
    self_loops: bool = True
    user_embedding: str = "shared"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1 or self.d_g < 1:
            raise ConfigurationError("graph widths and d_g must be positive")
        if self.n_windows < 1:
            raise ConfigurationError("graph.n_windows must be >= 1")
        if not self.window_len > 0:
            raise ConfigurationError("graph.window_len must be positive")
        if self.user_embedding not in ("shared", "per_node"):
            raise ConfigurationError("graph.user_embedding must be 'shared' or 'per_node'")

    @property
    def out_width(self) -> int:
        return self.widths[-1]


@dataclass
class TgnnParams:
    config: TgnnConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_tgnn_params(config: TgnnConfig, rng: np.random.Generator) -> TgnnParams:
    p: dict[str, Tensor] = {}
    d_in = config.d_g
    for layer, d_out in enumerate(config.widths):
        bound = 1.0 / np.sqrt(d_in)
        p[f"gcn{layer}.W"] = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        p[f"gcn{layer}.b"] = Tensor(rng.uniform(-bound, bound, (d_out,)), requires_grad=True)
        d_in = d_out
    bound = 1.0 / np.sqrt(d_in)
    p["tatt.W"] = Tensor(rng.uniform(-bound, bound, (d_in, d_in)), requires_grad=True)
    p["tatt.b"] = Tensor(np.zeros(d_in), requires_grad=True)
    p["tatt.q"] = Tensor(rng.uniform(-bound, bound, (d_in,)), requires_grad=True)
    return TgnnParams(config, p)


def init_node_embedding(n_rows: int, d_g: int, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(-0.1, 0.1, (n_rows, d_g)), requires_grad=True)


def tgcn_layer(prop: np.ndarray | Tensor, h: Tensor, params: TgnnParams, layer: int) -> Tensor:
    """One convolution: relu(M @ H @ W + b) with M from :func:`normalized_propagation`."""
    h = as_tensor(h)
    w = params[f"gcn{layer}.W"]
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise DimensionError(f"layer {layer} expects width {w.shape[0]}, features are {h.shape}")
    prop = as_tensor(prop)
    if prop.shape != (h.shape[0], h.shape[0]):
        raise DimensionError(f"propagation {prop.shape} vs {h.shape[0]} nodes")
    return ops.relu(ops.add_bias(ops.matmul(prop, ops.matmul(h, w)), params[f"gcn{layer}.b"]))


def window_bounds(t_query: float, n_windows: int, window_len: float) -> list[tuple[float, float]]:
    """The ``n_windows`` consecutive half-open windows ending at ``t_query``, oldest first."""
    if n_windows < 1:
        raise DegenerateInputError("need at least one window")
    if not window_len > 0:
        raise ValidationError("window_len must be positive")
    return [
        (t_query - (n_windows - k) * window_len, t_query - (n_windows - k - 1) * window_len)
        for k in range(n_windows)
    ]


def window_propagation(graph: InteractionGraph, bounds: tuple[float, float], config: TgnnConfig) -> np.ndarray:
    adj = snapshot(graph, bounds[0], bounds[1], config.include_follow)
    return normalized_propagation(adj, config.reverse_edges, config.self_loops)


def convolve_window(prop: np.ndarray, base: Tensor, params: TgnnParams) -> Tensor:
    h = base
    for layer in range(len(params.config.widths)):
        h = tgcn_layer(prop, h, params, layer)
    return h


def convolve_windows(props: np.ndarray, base: Tensor, params: TgnnParams) -> Tensor:
    """All windows at once: (W, n, n) propagation stack -> (W, n, d_out).

    Same result as :func:`convolve_window` per window, with one op per layer.
    """
    props = np.asarray(props, dtype=np.float64)
    base = as_tensor(base)
    n_win, n = props.shape[0], base.shape[0]
    if props.shape[1:] != (n, n):
        raise DimensionError(f"propagation stack {props.shape} vs {n} nodes")
    h = None
    for layer, d_out in enumerate(params.config.widths):
        w = params[f"gcn{layer}.W"]
        if h is None:
            if base.shape[1] != w.shape[0]:
                raise DimensionError(f"layer 0 expects width {w.shape[0]}, features are {base.shape}")
            mixed = ops.matmul(Tensor.constant(props.reshape(n_win * n, n)), ops.matmul(base, w))
            mixed = ops.reshape(mixed, (n_win, n, d_out))
        else:
            hw = ops.reshape(ops.matmul(ops.reshape(h, (n_win * n, h.shape[2])), w), (n_win, n, d_out))
            mixed = ops.matmul(Tensor.constant(props), hw)
        h = ops.relu(ops.add_bias(mixed, params[f"gcn{layer}.b"]))
    return h


def node_timeline(
    graph: InteractionGraph,
    node: int,
    t_query: float,
    base: Tensor,
    params: TgnnParams,
) -> list[Tensor]:
    """Final-layer embedding of ``node`` in each window before ``t_query``."""
    cfg = params.config
    if not 0 <= node < graph.n_nodes:
        raise ValidationError(f"node {node} outside [0, {graph.n_nodes})")
    out = []
    for bounds in window_bounds(t_query, cfg.n_windows, cfg.window_len):
        h = convolve_window(window_propagation(graph, bounds, cfg), base, params)
        out.append(ops.reshape(ops.take(h, [node], axis=0), (cfg.out_width,)))
    return out


def attention_scores_batch(timelines: Tensor, params: TgnnParams) -> Tensor:
    """q^T tanh(W h_t + b) for (B, T, d) timelines, returned as (B, T)."""
    B, T, d = timelines.shape
    if d != params["tatt.W"].shape[0]:
        raise DimensionError(f"timeline width {d} vs attention width {params['tatt.W'].shape[0]}")
    hidden = ops.tanh(ops.add_bias(ops.matmul(ops.reshape(timelines, (B * T, d)), params["tatt.W"]), params["tatt.b"]))
    q = ops.reshape(params["tatt.q"], (d, 1))
    return ops.reshape(ops.matmul(hidden, q), (B, T))


def aggregate_batch(alpha: Tensor, timelines: Tensor) -> Tensor:
    """Sum over t of alpha_t * h_t: (B, T) and (B, T, d) -> (B, d)."""
    B, T, d = timelines.shape
    if alpha.shape != (B, T):
        raise DimensionError(f"weights {alpha.shape} vs timeline {timelines.shape}")
    return ops.reshape(ops.matmul(ops.reshape(alpha, (B, 1, T)), timelines), (B, d))


def sequence_embedding_batch(timelines: Tensor, params: TgnnParams) -> tuple[Tensor, Tensor]:
    """Attention weights (B, T) and sequence embeddings (B, d)."""
    alpha = ops.rowwise_softmax(attention_scores_batch(timelines, params))
    return alpha, aggregate_batch(alpha, timelines)


def temporal_attention(timeline: Sequence[Tensor], params: TgnnParams) -> Tensor:
    if len(timeline) < 1:
        raise DegenerateInputError("temporal attention needs at least one step")
    stacked = _stack_timeline(timeline)
    return ops.reshape(ops.rowwise_softmax(attention_scores_batch(stacked, params)), (len(timeline),))


def aggregate(alpha: Tensor, timeline: Sequence[Tensor]) -> Tensor:
    alpha = as_tensor(alpha)
    if alpha.shape != (len(timeline),):
        raise DimensionError(f"{alpha.shape[0] if alpha.ndim else 0} weights for {len(timeline)} steps")
    stacked = _stack_timeline(timeline)
    return ops.reshape(aggregate_batch(ops.reshape(alpha, (1, len(timeline))), stacked), (stacked.shape[2],))


def _stack_timeline(timeline: Sequence[Tensor]) -> Tensor:
    rows = [as_tensor(h) for h in timeline]
    d = rows[0].shape[0]
    return ops.reshape(ops.concat([ops.reshape(h, (1, d)) for h in rows], axis=0), (1, len(rows), d))


def tgnn_forward(
    graph: InteractionGraph,
    node: int,
    t_query: float,
    base: Tensor,
    params: TgnnParams,
) -> tuple[Tensor, Tensor]:
    """Sequence embedding of ``node`` at ``t_query`` and its temporal weights."""
    timeline = node_timeline(graph, node, t_query, base, params)
    alpha = temporal_attention(timeline, params)
    return aggregate(alpha, timeline), alpha
