"""First-order optimizers operating in place on leaf tensors."""
from __future__ import annotations

from typing import Iterable, List, Optional

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params: List[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.base_lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, params: Optional[Iterable[Tensor]] = None) -> None:
        """Update ``params`` (default: all registered) from their ``grad`` buffers."""
        for p in self.params if params is None else params:
            if p.requires_grad:
                p.data = self._update(p)

    def _update(self, p: Tensor) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Plain gradient descent, optionally with heavy-ball momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self._velocity = {}

    def _update(self, p):
        if self.momentum == 0.0:
            return p.data - self.lr * p.grad
        v = self.momentum * self._velocity.get(id(p), 0.0) + p.grad
        self._velocity[id(p)] = v
        return p.data - self.lr * v


class AdamW(Optimizer):
    """Adam with decoupled weight decay; per-parameter step counters."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._state = {}

    def _update(self, p):
        t, m, v = self._state.get(id(p), (0, 0.0, 0.0))
        t += 1
        g = p.grad
        m = self.b1 * m + (1 - self.b1) * g
        v = self.b2 * v + (1 - self.b2) * g * g
        self._state[id(p)] = (t, m, v)
        mhat = m / (1 - self.b1**t)
        vhat = v / (1 - self.b2**t)
        lr = self.lr
        data = p.data
        if self.weight_decay:
            data = data - lr * self.weight_decay * data
        return data - lr * mhat / (np.sqrt(vhat) + self.eps)


class StepDecay:
    """Multiply the learning rate by ``gamma`` every ``step_size`` epochs."""

    def __init__(self, optimizer: Optimizer, step_size: int, gamma: float = 0.1):
        self.optimizer = optimizer
        self.step_size = max(1, int(step_size))
        self.gamma = gamma
        self.epoch = 0

    def step(self) -> None:
        self.epoch += 1
        self.optimizer.lr = self.optimizer.base_lr * self.gamma ** (self.epoch // self.step_size)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr)
    if name == "momentum":
        return SGD(params, lr, momentum=momentum)
    if name in ("adam", "adamw"):
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
