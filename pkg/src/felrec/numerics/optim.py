"""Momentum SGD and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from felrec.numerics.tensor import Tensor


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    momentum: float = 0.9
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
) -> None:
    """One heavy-ball update, ``v = m*v + g; w = w - lr*v``, with no weight decay.

    Parameters without a gradient are skipped. All gradients are checked
    before any parameter is touched, so a non-finite value leaves the model
    and the state unchanged.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.buffers[name] = v
        v *= state.momentum
        v += g
        p.data -= lr * v
    state.step += 1


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int = 100
    warmup_epochs: int = 10
    steps_per_epoch: int = 1
    base_lr: float = 0.01

    def __post_init__(self):
        if self.total_epochs <= 0 or self.steps_per_epoch <= 0:
            raise ValueError("schedule: epochs and steps per epoch must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("schedule: warmup epochs must be smaller than total epochs")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def cosine_lr(step: int, config: ScheduleConfig) -> float:
    """Linear warmup from 0 to the base rate, then half-cosine decay to 0."""
    step = min(max(step, 0), config.total_steps)
    warmup = config.warmup_steps
    if step < warmup:
        return config.base_lr * step / warmup
    progress = (step - warmup) / (config.total_steps - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
