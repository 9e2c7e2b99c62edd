"""SGD with momentum and the two learning-rate schedules used for training."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Parameter


def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place update: ``v = momentum*v + grad + wd*param; param -= lr*v``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p, g, v in zip(params, grads, velocities):
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step(
            [p.data for p in self.params], grads, self.velocities,
            self.lr, self.momentum, self.weight_decay,
        )


def default_milestones(total_epochs: int) -> list[int]:
    """80/120 of 160 epochs, scaled proportionally to other run lengths."""
    if total_epochs == 160:
        return [80, 120]
    return [max(1, int(round(total_epochs * 0.5))), max(1, int(round(total_epochs * 0.75)))]


def lr_schedule(kind: str, t: float, total: float, lr0: float,
                milestones: Optional[Sequence[int]] = None) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    if kind == "cosine":
        return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))
    if kind == "step":
        if milestones is None:
            milestones = default_milestones(int(total))
        passed = sum(1 for m in milestones if t >= m)
        return lr0 / (10.0 ** passed)
    raise ValueError(f"unknown schedule {kind!r}; expected 'cosine' or 'step'")
