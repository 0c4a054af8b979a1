"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    out = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(fn().data.sum())
                flat[i] = orig - step
                lo = float(fn().data.sum())
                flat[i] = orig
                g.reshape(-1)[i] = (hi - lo) / (2 * step)
            out.append(g)
    return out


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    backward(fn())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the magnitude of the reference gradient."""
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error over all ``inputs``; ``fn`` must return a scalar."""
    a = analytic_grads(fn, inputs)
    n = numerical_grads(fn, inputs, step)
    return max(relative_error(x, y) for x, y in zip(a, n))
