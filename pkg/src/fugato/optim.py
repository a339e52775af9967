"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .nn import Parameter


def clip_global_norm(params: list[Parameter], threshold: float) -> float:
    """Rescale all gradients in place when their global L2 norm exceeds
    ``threshold``; returns the pre-clip norm."""
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > threshold:
        factor = threshold / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class AdamW:
    """Bias-corrected Adam with weight decay applied directly to weights.

    Non-finite gradients reject the whole step (weights untouched) and
    increment ``rejected_steps``.
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.rejected_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> bool:
        """One update at learning rate ``lr``; False if rejected."""
        grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not np.isfinite(g).all():
                self.rejected_steps += 1
                return False
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            if p.m is None:
                p.m = np.zeros_like(p.data)
                p.v = np.zeros_like(p.data)
            p.step += 1
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * g * g
            m_hat = p.m / (1.0 - self.beta1**p.step)
            v_hat = p.v / (1.0 - self.beta2**p.step)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)
        return True
