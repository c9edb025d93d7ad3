"""Differentiable operations on :class:`Tensor`.

Broadcasting is deliberately absent: operands must have identical shapes,
except that a 0-d tensor or Python number may be combined with anything.
Bias addition over rows has its own op (:func:`add_bias`) so that every
gradient rule stays a few lines long.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from mtdqn.errors import ConfigurationError, DegenerateInputError, DimensionError
from mtdqn.numerics.tensor import Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or of stacks with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        a.ndim == b.ndim
        and a.ndim in (2, 3)
        and a.shape[:-2] == b.shape[:-2]
        and a.shape[-1] == b.shape[-2]
    )
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = _swap(ad) @ g if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def elementwise(kind: str, x, y) -> Tensor:
    """``add``/``sub``/``mul`` of equal-shaped tensors (or scalar with tensor)."""
    if kind not in ("add", "sub", "mul"):
        raise ConfigurationError(f"unknown elementwise kind {kind!r}")
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape and not (_is_scalar(x) or _is_scalar(y)):
        raise DimensionError(f"elementwise {kind} shape mismatch: {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    xs, ys = x.shape, y.shape

    def fit(g, shape):
        return np.asarray(g.sum()).reshape(shape) if shape != g.shape else g

    if kind == "add":
        out = xd + yd

        def backward(g):
            return fit(g, xs), fit(g, ys)
    elif kind == "sub":
        out = xd - yd

        def backward(g):
            return fit(g, xs), fit(-g, ys)
    else:
        out = xd * yd

        def backward(g):
            return fit(g * yd, xs), fit(g * xd, ys)

    return make_result(np.asarray(out, dtype=np.float64), (x, y), backward)


def add(x, y) -> Tensor:
    return elementwise("add", x, y)


def sub(x, y) -> Tensor:
    return elementwise("sub", x, y)


def mul(x, y) -> Tensor:
    return elementwise("mul", x, y)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row (last axis) of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead) if lead else g

    return make_result(x.data + b.data, (x, b), backward)


def rowwise_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh`` or ``relu``."""
    x = as_tensor(x)
    if kind == "sigmoid":
        y = _sigmoid(x.data)

        def backward(g):
            return (g * y * (1.0 - y),)
    elif kind == "tanh":
        y = np.tanh(x.data)

        def backward(g):
            return (g * (1.0 - y * y),)
    elif kind == "relu":
        mask = x.data > 0
        y = np.where(mask, x.data, 0.0)

        def backward(g):
            return (g * mask,)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return make_result(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DegenerateInputError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            shapes = [t.shape for t in tensors]
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
        n = x.shape[axis]
    if n == 0:
        raise DegenerateInputError("mean over an empty axis")
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make_result(np.asarray(x.data.mean(axis=axis)), (x,), backward)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1] if x.ndim else 0
    if n < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g_gain = (g * xhat).sum(axis=lead) if lead else g * xhat
        g_bias = g.sum(axis=lead) if lead else g
        return gx, g_gain, g_bias

    return make_result(xhat * gd + bias.data, (x, gain, bias), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(old),)

    return make_result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis of size {x.shape[axis]}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        return (2.0 * g * xd,)

    return make_result(xd * xd, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate`` is 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return mul(x, Tensor._wrap(mask, False))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy, computed stably from logits."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    # softplus(z) - y*z, with softplus written to avoid overflow
    loss = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)
    n = z.size

    def backward(g):
        return (float(g) * (p - y) / n,)

    return make_result(np.asarray(loss.mean()), (logits,), backward)
