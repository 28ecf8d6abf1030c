"""Central finite-difference gradient checks for the tensor engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[list[np.ndarray]], float], arrays: Sequence[np.ndarray], h: float = 1e-3):
    """Central differences of scalar ``f`` w.r.t. every element of every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(arrays)
            flat[i] = old - h
            fm = f(arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]):
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Largest relative error between backward and finite differences, over all inputs.

    ``fn`` maps float64 tensors to a scalar tensor. Runs in float64 so the
    finite-difference roundoff stays far below the tolerance being checked.
    """

    def f(arrs):
        return fn(*[Tensor(a, dtype=np.float64) for a in arrs]).item()

    num = numerical_gradient(f, arrays, h)
    ana = analytic_gradient(fn, arrays)
    return max(relative_error(a, n) for a, n in zip(ana, num))
