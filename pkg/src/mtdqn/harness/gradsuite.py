"""Finite-difference check of every differentiable operation and composed forward.

Each case builds a scalar function of its inputs (a fixed random linear
readout of the op's output) at a fresh random point; the worst relative
error between tape gradients and central differences over all points is
reported per case.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mtdqn import agent, fusion, temporal_graph
from mtdqn.numerics import ops
from mtdqn.numerics.gradcheck import check_gradients
from mtdqn.numerics.tensor import Tensor

TOLERANCE = 1e-5
N_POINTS = 10

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass(frozen=True)
class CaseResult:
    name: str
    worst: float
    points: int
    passed: bool


@dataclass(frozen=True)
class GradReport:
    cases: tuple[CaseResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def failures(self) -> list[CaseResult]:
        return [c for c in self.cases if not c.passed]

    def lines(self) -> list[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'} {c.name:<22} worst={c.worst:.3e} points={c.points}"
               for c in self.cases]
        out.append(f"{len(self.cases) - len(self.failures)}/{len(self.cases)} passed")
        return out


def _readout(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    c = Tensor(rng.normal(size=shape))
    return lambda t: ops.reduce_sum(ops.mul(t, c))


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    # central differences straddling the relu kink are meaningless
    return np.where(np.abs(x) < 0.05, 0.5, x)


# --- primitive ops ---------------------------------------------------------------

def _matmul(rng):
    ro = _readout(rng, (3, 2))
    return lambda a, b: ro(ops.matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]


def _matmul_batched(rng):
    ro = _readout(rng, (2, 3, 2))
    return lambda a, b: ro(ops.matmul(a, b)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]


def _softmax(rng):
    ro = _readout(rng, (3, 4))
    return lambda x: ro(ops.rowwise_softmax(x)), [rng.normal(size=(3, 4))]


def _unary(name: str) -> Builder:
    def build(rng):
        ro = _readout(rng, (5,))
        x = rng.normal(size=5)
        if name == "relu":
            x = _away_from_zero(x)
        return lambda t: ro(getattr(ops, name)(t)), [x]
    return build


def _binary(name: str) -> Builder:
    def build(rng):
        ro = _readout(rng, (2, 3))
        return (lambda x, y: ro(getattr(ops, name)(x, y)),
                [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])
    return build


def _scalar_mul(rng):
    ro = _readout(rng, (4,))
    return lambda s, x: ro(ops.mul(s, x)), [np.array(rng.normal()), rng.normal(size=4)]


def _add_bias(rng):
    ro = _readout(rng, (3, 4))
    return lambda x, b: ro(ops.add_bias(x, b)), [rng.normal(size=(3, 4)), rng.normal(size=4)]


def _concat(rng):
    ro = _readout(rng, (2, 5))
    return lambda a, b: ro(ops.concat([a, b], axis=1)), [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]


def _reduce_mean(rng):
    ro = _readout(rng, (3,))
    return lambda x: ro(ops.reduce_mean(x, axis=1)), [rng.normal(size=(3, 4))]


def _reduce_sum(rng):
    ro = _readout(rng, (4,))
    return lambda x: ro(ops.reduce_sum(x, axis=0)), [rng.normal(size=(3, 4))]


def _layer_norm(rng):
    ro = _readout(rng, (2, 5))
    return (lambda x, g, b: ro(ops.layer_norm(x, g, b)),
            [rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)])


def _reshape_transpose(rng):
    ro = _readout(rng, (4, 3, 2))
    return lambda x: ro(ops.transpose(ops.reshape(x, (2, 3, 4)), (2, 1, 0))), [rng.normal(size=(6, 4))]


def _take(rng):
    ro = _readout(rng, (4, 3))
    return lambda x: ro(ops.take(x, [2, 0, 2, 1], axis=0)), [rng.normal(size=(3, 3))]


def _square(rng):
    ro = _readout(rng, (4,))
    return lambda x: ro(ops.square(x)), [rng.normal(size=4)]


def _dropout(rng):
    ro = _readout(rng, (3, 4))
    seed = int(rng.integers(2**31))
    # a fresh generator per call keeps the mask fixed across perturbations
    return (lambda x: ro(ops.dropout(x, 0.3, np.random.default_rng(seed), True)),
            [rng.normal(size=(3, 4))])


def _bce(rng):
    y = (rng.random(6) < 0.5).astype(float)
    return lambda z: ops.bce_with_logits(z, y), [rng.normal(size=6) * 2]


# --- composed forwards -------------------------------------------------------------

def _fusion_forward(rng):
    cfg = fusion.FusionConfig(d_v=4, d_t=3, d_a=5, d_model=4, n_heads=2, n_layers=2, dropout=0.0)
    init = fusion.init_fusion_params(cfg, rng).tensors
    names = sorted(init)
    # perturb gains and biases away from their init so every path is exercised
    values = [init[n].data + 0.1 * rng.normal(size=init[n].shape) for n in names]
    ro = _readout(rng, (cfg.d_model,))

    def fn(v, t, a, *ps):
        params = fusion.FusionParams(cfg, dict(zip(names, ps)))
        fused, _ = fusion.fusion_forward_batch((ops.reshape(v, (1, 4)), ops.reshape(t, (1, 3)),
                                                ops.reshape(a, (1, 5))), params)
        return ro(ops.reshape(fused, (cfg.d_model,)))

    return fn, [rng.normal(size=4), rng.normal(size=3), rng.normal(size=5), *values]


def _random_graph(rng, n_users: int, n_videos: int, horizon: float) -> temporal_graph.InteractionGraph:
    events = []
    for _ in range(int(rng.integers(8, 16))):
        actor = int(rng.integers(n_users))
        behavior = temporal_graph.BEHAVIORS[int(rng.integers(len(temporal_graph.BEHAVIORS)))]
        target = int(rng.integers(n_users if behavior == "follow" else n_videos))
        events.append(temporal_graph.InteractionEvent(actor, target, behavior, float(rng.uniform(0, horizon)),
                                                      float(rng.uniform(0.5, 2.0))))
    return temporal_graph.build_graph(events, n_users, n_videos)


def _tgnn_forward(rng):
    cfg = temporal_graph.TgnnConfig(widths=(4, 3), d_g=4, n_windows=3)
    graph = _random_graph(rng, 3, 3, 3.0)
    init = temporal_graph.init_tgnn_params(cfg, rng).tensors
    names = sorted(init)
    node = int(rng.integers(graph.n_nodes))
    ro = _readout(rng, (cfg.out_width,))

    def fn(base, *ps):
        params = temporal_graph.TgnnParams(cfg, dict(zip(names, ps)))
        h_seq, _ = temporal_graph.tgnn_forward(graph, node, 3.0, base, params)
        return ro(h_seq)

    return fn, [rng.normal(size=(graph.n_nodes, cfg.d_g)), *(init[n].data for n in names)]


def _q_of_concat(rng):
    init = agent.init_qnet_params(7, (5,), 3, rng)
    names = sorted(init)
    ro = _readout(rng, (3,))

    def fn(f, h, *ps):
        return ro(agent.q_values(ops.concat([f, h], axis=0), dict(zip(names, ps))))

    return fn, [rng.normal(size=4), rng.normal(size=3), *(init[n].data for n in names)]


CASES: tuple[tuple[str, Builder], ...] = (
    ("matmul", _matmul),
    ("matmul_batched", _matmul_batched),
    ("rowwise_softmax", _softmax),
    ("sigmoid", _unary("sigmoid")),
    ("tanh", _unary("tanh")),
    ("relu", _unary("relu")),
    ("add", _binary("add")),
    ("sub", _binary("sub")),
    ("mul", _binary("mul")),
    ("scalar_mul", _scalar_mul),
    ("add_bias", _add_bias),
    ("concat", _concat),
    ("reduce_mean", _reduce_mean),
    ("reduce_sum", _reduce_sum),
    ("layer_norm", _layer_norm),
    ("reshape_transpose", _reshape_transpose),
    ("take", _take),
    ("square", _square),
    ("dropout", _dropout),
    ("bce_with_logits", _bce),
    ("fusion_forward", _fusion_forward),
    ("tgnn_forward", _tgnn_forward),
    ("q_values_concat", _q_of_concat),
)


def run_case(name: str, build: Builder, points: int = N_POINTS, seed: int = 0,
             tolerance: float = TOLERANCE) -> CaseResult:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    worst = 0.0
    for _ in range(points):
        fn, inputs = build(rng)
        worst = max(worst, check_gradients(fn, inputs))
    return CaseResult(name, worst, points, bool(worst < tolerance))


def gradcheck(points: int = N_POINTS, seed: int = 0, tolerance: float = TOLERANCE,
              cases=CASES) -> GradReport:
    return GradReport(tuple(run_case(n, b, points, seed, tolerance) for n, b in cases))
