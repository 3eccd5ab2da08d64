"""Adam and global-norm gradient clipping for :class:`~pamoe.autodiff.Tensor` leaves."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float = 1.0) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with per-tensor step counts.

    A tensor whose gradient is exactly zero everywhere is skipped entirely
    (moments are not decayed, its step count does not advance). Without this,
    stale momentum would keep moving an expert that served no step in the
    batch.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 skip_zero_grad: bool = True):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.skip_zero_grad = skip_zero_grad
        self.steps = [0] * len(self.params)
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None or (self.skip_zero_grad and not np.any(g)):
                continue
            self.steps[i] += 1
            t = self.steps[i]
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1 ** t)
            v_hat = self.v[i] / (1.0 - b2 ** t)
            # in place so every holder of the Tensor sees the update
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.values)

    def state_dict(self) -> dict:
        return {"steps": list(self.steps), "m": [m.copy() for m in self.m],
                "v": [v.copy() for v in self.v]}
