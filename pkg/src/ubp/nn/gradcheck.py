"""Central finite-difference check of analytic gradients (float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import SparseGrad, Tensor


def dense_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        return np.zeros_like(t.data)
    if isinstance(t.grad, SparseGrad):
        return t.grad.to_dense()
    return t.grad


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], n_probes: int = 10,
              h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` must rebuild the scalar loss from the current ``inputs`` data on
    every call and be deterministic. ``n_probes`` random coordinates are
    probed per input.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [dense_grad(t).copy() for t in inputs]
    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(n_probes, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + h
            up = fn().item()
            flat[j] = orig - h
            down = fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, rel_error(float(g.reshape(-1)[j]), numeric))
    for t in inputs:
        t.grad = None
    return worst
