"""Learning-rate schedule and first-order optimizers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    epochs: int
    warmup_epochs: int = 0
    warmup_start_factor: float = 0.1
    decay: str = "cosine"
    milestones: tuple = (30, 50)
    gamma: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if self.decay not in ("cosine", "multistep"):
            raise ValueError(f"unknown decay {self.decay!r}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a zero-based epoch.

    Linear warm-up from ``warmup_start_factor * base_lr`` towards ``base_lr``,
    then cosine annealing over the remaining epochs or step decay by
    ``gamma`` at each milestone passed.
    """
    s = schedule
    if epoch < s.warmup_epochs:
        f = s.warmup_start_factor
        return s.base_lr * (f + (1.0 - f) * epoch / s.warmup_epochs)
    if s.decay == "cosine":
        t = epoch - s.warmup_epochs
        span = s.epochs - s.warmup_epochs
        return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / span))
    passed = sum(1 for m in s.milestones if epoch >= m)
    return s.base_lr * s.gamma ** passed


class SGD:
    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
