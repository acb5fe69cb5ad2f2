"""Mini-batch SGD with momentum and the triangular learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TriangularSchedule:
    """Piecewise-linear rate: base -> peak at `peak_epoch`, back to base at
    `total_epochs`."""

    base_rate: float
    peak_rate: float
    peak_epoch: int
    total_epochs: int

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if self.peak_rate < self.base_rate:
            raise ValueError("peak_rate must be >= base_rate")
        if not (0 < self.peak_epoch <= self.total_epochs):
            raise ValueError("need 0 < peak_epoch <= total_epochs")


def lr_at(schedule, epoch):
    """Learning rate at an integer epoch of a triangular schedule."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch <= schedule.peak_epoch:
        frac = epoch / schedule.peak_epoch
        return schedule.base_rate + frac * (schedule.peak_rate - schedule.base_rate)
    span = schedule.total_epochs - schedule.peak_epoch
    if span == 0:
        return schedule.peak_rate
    frac = (epoch - schedule.peak_epoch) / span
    return schedule.peak_rate + frac * (schedule.base_rate - schedule.peak_rate)


class SGD:
    """Momentum SGD over a fixed parameter list.

    Each step applies p <- p - rate * v with v the momentum-accumulated
    gradient. Gradients are left untouched; call `zero_grad` between steps.
    """

    def __init__(self, params, momentum=0.9):
        if not (0 <= momentum < 1):
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, rate):
        if rate <= 0:
            raise ValueError("learning rate must be positive")
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= rate * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
