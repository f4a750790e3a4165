"""First-order optimizers over named parameter tensors."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

SCHEDULES = ("constant", "cosine")


def learning_rate(base: float, schedule: str, step: int, total_steps: int) -> float:
    if schedule == "constant" or total_steps <= 1:
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    raise ConfigError(f"unknown lr schedule {schedule!r} (expected one of {SCHEDULES})")


class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr

    def step(self, names: Iterable[str], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name in names:
            p = self.params[name]
            if p.grad is not None:
                self._update(name, p, lr)

    def _update(self, name: str, p: Tensor, lr: float) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9):
        super().__init__(params, lr)
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def _update(self, name, p, lr):
        v = self.velocity.get(name)
        v = p.grad.copy() if v is None else self.momentum * v + p.grad
        self.velocity[name] = v.astype(p.data.dtype)
        p.data -= (lr * v).astype(p.data.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def _update(self, name, p, lr):
        g = p.grad.astype(np.float64)
        t = self.t.get(name, 0) + 1
        m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
        v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
        self.m[name], self.v[name], self.t[name] = m, v, t
        # per-parameter step count: the head is frozen through triplet phases
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd-momentum":
        return SGDMomentum(params, lr=lr, momentum=momentum)
    raise ConfigError(f"unknown optimizer {kind!r} (expected 'adam' or 'sgd-momentum')")
