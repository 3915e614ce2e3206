"""SGD and AdamW over master weights, with per-epoch learning-rate schedules."""

from __future__ import annotations

import math

from .engine import Tensor


class SGD:
    """Momentum SGD with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v = g if self._velocity[i] is None else self.momentum * self._velocity[i] + g
                self._velocity[i] = v
            else:
                v = g
            p.data -= self.lr * v


class AdamW:
    """Adam with decoupled weight decay (decay applied directly to the weights)."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [None] * len(self.params)
        self._v = [None] * len(self.params)
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self._m[i] is None:
                self._m[i] = (1 - self.beta1) * g
                self._v[i] = (1 - self.beta2) * g * g
            else:
                self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
                self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1 ** self._t)
            v_hat = self._v[i] / (1 - self.beta2 ** self._t)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (v_hat ** 0.5 + self.eps)


def lr_at(base_lr: float, schedule: str, epoch: int, total_epochs: int) -> float:
    """Per-epoch learning rate; cosine decays from base toward ~0 at the end."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(total_epochs, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}")
