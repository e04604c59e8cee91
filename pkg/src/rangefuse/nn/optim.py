"""SGD with momentum and a staircase exponential learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ParamStore


@dataclass(frozen=True)
class Schedule:
    """Decays ``lr_start`` toward ``lr_end`` in steps every ``decay_every`` iterations."""

    lr_start: float = 2e-3
    lr_end: float = 2e-5
    total: int = 2000
    decay_every: int = 250

    def __call__(self, it: int) -> float:
        n_steps = max(self.total // self.decay_every, 1)
        k = min(it // self.decay_every, n_steps)
        return self.lr_start * (self.lr_end / self.lr_start) ** (k / n_steps)


class SGD:
    def __init__(self, params: ParamStore, schedule: Schedule, momentum: float = 0.9,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = params
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(t.data) for k, t in params}
        self.it = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum())
                                 for _, t in self.params if t.grad is not None)))

    def step(self) -> float:
        """Apply one update; returns the (pre-clipping) global gradient norm."""
        lr = self.schedule(self.it)
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        for k, t in self.params:
            if t.grad is None:
                continue
            g = t.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            t.data -= lr * v
        self.it += 1
        return norm
