"""Adam, cosine learning-rate annealing and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from mtdqn.errors import ContractError, DimensionError
from mtdqn.numerics.tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """Bias-corrected Adam update, applied in place.

    Parameters missing from ``grads`` are treated as having zero gradient,
    which still advances their moment estimates.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"grad for {name}: {g.shape} vs param {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class CosineSchedule:
    lr0: float = 1e-3
    lr_min: float = 1e-5
    total_steps: int = 1000


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    """Per-step cosine annealing from ``lr0`` down to ``lr_min``.

    Steps outside ``[0, total_steps]`` are clamped to the nearest endpoint.
    """
    total = max(int(schedule.total_steps), 1)
    s = min(max(step, 0), total)
    return schedule.lr_min + 0.5 * (schedule.lr0 - schedule.lr_min) * (
        1.0 + math.cos(math.pi * s / total)
    )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
