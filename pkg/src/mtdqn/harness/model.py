"""Recommender scoring functions assembled from content, user-context and head components.

A variant is a triple:

* content: ``transformer`` (gated attention fusion), ``concat_linear``
  (linear map of the concatenated projections) or ``raw`` (the raw modality
  vectors concatenated, no parameters);
* context: ``tgnn`` (windowed graph convolution with temporal attention),
  ``mean_history`` (mean content vector of the user's last T behavior
  targets) or ``none``;
* head: ``dqn`` (TD-trained value of showing a candidate) or
  ``supervised`` (engagement logit trained with cross-entropy).

Every candidate in a slate gets the state ``[content(video); context(user)]``
and the head maps it to one score, so the slate's K scores are its action
values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mtdqn.agent import Transition, init_qnet_params, q_forward
from mtdqn.environment import World
from mtdqn.fusion import (
    FusionParams,
    concat_forward_batch,
    fusion_forward_batch,
    init_concat_params,
    init_fusion_params,
)
from mtdqn.harness.config import ExperimentConfig
from mtdqn.numerics import ops
from mtdqn.numerics.tensor import Tensor
from mtdqn.temporal_graph import (
    InteractionEvent,
    InteractionGraph,
    TgnnParams,
    build_graph,
    convolve_windows,
    init_tgnn_params,
    sequence_embedding_batch,
    window_bounds,
    window_propagation,
)

VARIANT_PARTS = {
    "MT-DQN": ("transformer", "tgnn", "dqn"),
    "-Transformer": ("concat_linear", "tgnn", "dqn"),
    "-TGNN": ("transformer", "mean_history", "dqn"),
    "-DQN": ("transformer", "tgnn", "supervised"),
    "Concat-Modal": ("concat_linear", "mean_history", "supervised"),
    "Vanilla-DQN": ("raw", "none", "dqn"),
}

ParamDict = dict[str, Tensor]


@dataclass(frozen=True)
class StateRef:
    """A user at the start of a round looking at a slate of candidate videos."""

    user: int
    round: int
    slate: tuple[int, ...]


@dataclass(frozen=True)
class Example:
    """A shown candidate with its realized engagement label (supervised head)."""

    s: StateRef
    a: int
    label: float


class History:
    """Event history as seen by the context encoders.

    Rounds are the time unit: round ``r`` spans ``[r, r + 1)``. Windows are
    only queried once every event inside them has been recorded.
    """

    def __init__(self, n_users: int, n_videos: int, config: ExperimentConfig):
        self.n_users = n_users
        self.n_videos = n_videos
        self.graph_config = config.graph
        self.events: list[InteractionEvent] = []
        self.targets: list[list[tuple[float, int]]] = [[] for _ in range(n_users)]
        self.graph: InteractionGraph = build_graph([], n_users, n_videos)
        self._props: dict[tuple[float, float], np.ndarray] = {}

    def add(self, events: Sequence[InteractionEvent]) -> None:
        for e in events:
            self.events.append(e)
            if e.target_kind == "video":
                self.targets[e.actor].append((e.timestamp, e.target))

    def close_round(self) -> None:
        """Rebuild the graph after a round's events are complete."""
        self.graph = build_graph(self.events, self.n_users, self.n_videos)

    def windows(self, round_: int) -> list[tuple[float, float]]:
        cfg = self.graph_config
        return window_bounds(float(round_), cfg.n_windows, cfg.window_len)

    def propagation(self, bounds: tuple[float, float]) -> np.ndarray:
        prop = self._props.get(bounds)
        if prop is None:
            prop = window_propagation(self.graph, bounds, self.graph_config)
            self._props[bounds] = prop
        return prop

    def recent_targets(self, user: int, round_: int) -> list[int]:
        limit = float(round_)
        past = [v for t, v in self.targets[user] if t < limit]
        return past[-self.graph_config.n_windows:]


def _prefixed(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def fingerprint(params: Mapping[str, Tensor]) -> str:
    h = hashlib.sha1()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


class RecommenderModel:
    """Scores (user, round, candidate) triples; implements the agent's Q-model interface."""

    def __init__(self, config: ExperimentConfig, world: World, history: History, rng: np.random.Generator):
        self.config = config
        self.content, self.context, self.head = VARIANT_PARTS[config.variant]
        self.history = history
        self.raw = (world.visual, world.text, world.audio)
        self.n_users = world.config.n_users
        params: ParamDict = {}
        if self.content == "transformer":
            fp = init_fusion_params(config.fusion, rng)
            params.update({f"fusion.{k}": v for k, v in fp.tensors.items()})
            d_content = config.fusion.d_model
        elif self.content == "concat_linear":
            cp = init_concat_params(config.fusion, rng)
            params.update({f"fusion.{k}": v for k, v in cp.tensors.items()})
            d_content = config.fusion.d_model
        else:
            self._raw_all = Tensor(np.concatenate(self.raw, axis=1))
            d_content = self._raw_all.shape[1]
        d_context = 0
        if self.context == "tgnn":
            tp = init_tgnn_params(config.graph, rng)
            params.update({f"tgnn.{k}": v for k, v in tp.tensors.items()})
            rows = 1 if config.graph.user_embedding == "shared" else self.n_users
            params["tgnn.user"] = Tensor(rng.uniform(-0.1, 0.1, (rows, config.graph.d_g)), requires_grad=True)
            d_context = config.graph.out_width
        elif self.context == "mean_history":
            d_context = d_content
        params.update(init_qnet_params(d_content + d_context, config.agent.hidden, 1, rng, prefix="head"))
        self.params = params
        self.state_dim = d_content + d_context
        self._target_cache: tuple[str, Scorer] | None = None

    # --- differentiable pieces ------------------------------------------------

    def content_all(self, params: Mapping[str, Tensor], training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        """Content vectors of every video, (M, d_content)."""
        if self.content == "raw":
            return self._raw_all
        fp = FusionParams(self.config.fusion, _prefixed(params, "fusion."))
        if self.content == "transformer":
            fused, _ = fusion_forward_batch(self.raw, fp, training, rng)
            return fused
        return concat_forward_batch(self.raw, fp)

    def context_batch(self, params: Mapping[str, Tensor], content: Tensor,
                      keys: Sequence[tuple[int, int]], cache: dict | None = None) -> Tensor | None:
        """Context vectors (B, d_context) for (user, round) keys."""
        if self.context == "none":
            return None
        if self.context == "mean_history":
            avg = np.zeros((len(keys), self.history.n_videos))
            for i, (u, r) in enumerate(keys):
                recent = self.history.recent_targets(u, r)
                for v in recent:
                    avg[i, v] += 1.0 / len(recent)
            return ops.matmul(Tensor(avg), content)
        tp = TgnnParams(self.config.graph, _prefixed(params, "tgnn."))
        user_rows = params["tgnn.user"]
        idx = np.zeros(self.n_users, dtype=np.int64) if user_rows.shape[0] == 1 else np.arange(self.n_users)
        base = ops.concat([ops.take(user_rows, idx, axis=0), content], axis=0)
        n_nodes = base.shape[0]
        order: dict[tuple[float, float], int] = {}
        for _, r in keys:
            for b in self.history.windows(r):
                order.setdefault(b, len(order))
        if cache is not None:
            # evaluation mode: per-window results are reused across calls
            missing = [b for b in order if b not in cache]
            if missing:
                h = convolve_windows(np.stack([self.history.propagation(b) for b in missing]), base, tp)
                for i, b in enumerate(missing):
                    cache[b] = ops.reshape(ops.take(h, [i], axis=0), (n_nodes, h.shape[2]))
            blocks = [cache[b] for b in order]
            stacked = ops.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        else:
            h = convolve_windows(np.stack([self.history.propagation(b) for b in order]), base, tp)
            stacked = ops.reshape(h, (len(order) * n_nodes, h.shape[2]))
        T = self.config.graph.n_windows
        rows = [order[b] * n_nodes + u for u, r in keys for b in self.history.windows(r)]
        timelines = ops.reshape(ops.take(stacked, rows, axis=0), (len(keys), T, stacked.shape[1]))
        _, h_seq = sequence_embedding_batch(timelines, tp)
        return h_seq

    def head_scores(self, params: Mapping[str, Tensor], states: Tensor, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        drop = self.config.agent.dropout
        out = q_forward(states, params, "head", drop, training, rng)
        return ops.reshape(out, (out.shape[0],))

    def scores(self, params: Mapping[str, Tensor], keys: Sequence[tuple[int, int]], videos: Sequence[int],
               training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Scores (B,) of showing ``videos[i]`` to user/round ``keys[i]``."""
        content = self.content_all(params, training, rng)
        parts = [ops.take(content, list(videos), axis=0)]
        ctx = self.context_batch(params, content, keys)
        if ctx is not None:
            parts.append(ctx)
        states = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return self.head_scores(params, states, training, rng)

    # --- Q-model interface ----------------------------------------------------

    def q_selected(self, params, batch: Sequence[Transition | Example], training, rng) -> Tensor:
        keys = [(t.s.user, t.s.round) for t in batch]
        videos = [t.s.slate[t.a] for t in batch]
        return self.scores(params, keys, videos, training, rng)

    def q_next_max(self, params, batch: Sequence[Transition]) -> np.ndarray:
        key = fingerprint(params)
        if self._target_cache is None or self._target_cache[0] != key:
            self._target_cache = (key, Scorer(self, params))
        scorer = self._target_cache[1]
        out = np.zeros(len(batch))
        live = [i for i, t in enumerate(batch) if not t.done]
        if live:
            refs = [batch[i].s_next for i in live]
            values = scorer.slate_scores_many(refs)
            out[live] = values.max(axis=1)
        return out


class Scorer:
    """Frozen evaluation-mode tables for one parameter snapshot.

    Content vectors are computed once; graph windows and per-(user, round)
    contexts are cached as they are first requested.
    """

    def __init__(self, model: RecommenderModel, params: Mapping[str, Tensor]):
        self.model = model
        self.params = {k: Tensor(v.data) for k, v in params.items()}
        self.content = model.content_all(self.params)
        self._windows: dict = {}
        self._contexts: dict[tuple[int, int], np.ndarray] = {}

    def contexts(self, keys: Sequence[tuple[int, int]]) -> np.ndarray | None:
        if self.model.context == "none":
            return None
        missing = sorted({k for k in keys if k not in self._contexts})
        if missing:
            ctx = self.model.context_batch(self.params, self.content, missing, self._windows)
            for k, row in zip(missing, ctx.data):
                self._contexts[k] = row
        return np.stack([self._contexts[k] for k in keys])

    def slate_scores_many(self, refs: Sequence[StateRef]) -> np.ndarray:
        """(len(refs), K) scores for every candidate of every slate."""
        K = len(refs[0].slate)
        videos = np.array([v for r in refs for v in r.slate])
        content = self.content.data[videos]
        ctx = self.contexts([(r.user, r.round) for r in refs])
        if ctx is not None:
            content = np.concatenate([content, np.repeat(ctx, K, axis=0)], axis=1)
        return self.model.head_scores(self.params, Tensor(content)).data.reshape(len(refs), K)

    def slate_scores(self, ref: StateRef) -> np.ndarray:
        return self.slate_scores_many([ref])[0]
