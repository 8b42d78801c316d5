"""Adam with parameter groups, global-norm clipping and the warmup schedule."""
from __future__ import annotations

import numpy as np

from .tensor import Parameter, SparseGrad


def grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        if isinstance(p.grad, SparseGrad):
            _, rows = p.grad.coalesce()
            total += float(np.sum(rows.astype(np.float64) ** 2))
        else:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(params: list[Parameter], max_norm: float = 1.0) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is None:
                continue
            if isinstance(p.grad, SparseGrad):
                p.grad.scale(scale)
            else:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def warmup_constant_lr(step: int, start_lr: float, peak_lr: float, warmup_steps: int) -> float:
    """Linear ramp from ``start_lr`` to ``peak_lr`` over ``warmup_steps``, then flat."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return peak_lr
    return start_lr + (peak_lr - start_lr) * step / warmup_steps


class Adam:
    """Adam (bias-corrected). ``groups`` is a list of ``{"params": [...], "lr": float}``.

    Tables flagged ``sparse`` are updated lazily: only rows that received a
    gradient in the current step move, and only their moments decay.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        if isinstance(groups, (list, tuple)) and groups and isinstance(groups[0], Parameter):
            groups = [{"params": list(groups), "lr": 1e-3}]
        self.groups = [dict(g, params=list(g["params"])) for g in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    @property
    def params(self) -> list[Parameter]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0, lr: float | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for group in self.groups:
            group_lr = (lr if lr is not None else group["lr"]) * lr_scale
            for p in group["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self.m:
                    self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                m, v = self.m[key], self.v[key]
                if isinstance(p.grad, SparseGrad):
                    idx, g = p.grad.coalesce()
                    m[idx] = b1 * m[idx] + (1 - b1) * g
                    v[idx] = b2 * v[idx] + (1 - b2) * g * g
                    upd = (m[idx] / c1) / (np.sqrt(v[idx] / c2) + self.eps)
                    p.data[idx] -= (group_lr * upd).astype(p.dtype)
                else:
                    g = p.grad
                    if g.shape != p.shape:
                        raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                    p.data -= (group_lr * upd).astype(p.dtype)
