"""Central finite differences and analytic-vs-numeric gradient comparison."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mtdqn.errors import ContractError
from mtdqn.numerics.tensor import Tape, Tensor


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base))
        flat[i] = orig - eps
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``fn`` takes one :class:`Tensor` per input and returns a scalar tensor.
    Every input is checked.
    """
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(xi, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = Tensor(xi)
            return fn(*args).item()

        numeric = finite_diff_grad(f, inputs[i], eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
