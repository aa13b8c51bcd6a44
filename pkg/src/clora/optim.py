"""Optimizers used by fine-tuning and backbone pretraining.

AdamW keeps decoupled weight decay out of the moment estimates; the KL term
is driven by plain SGD whose rate decays linearly to zero over the run.
Both operate on named RealMatrix parameters against a GradBuffer.
"""

from __future__ import annotations

import numpy as np

from .numerics import GradBuffer, RealMatrix


class AdamW:
    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self, values: dict[str, RealMatrix], grads: GradBuffer, names: list[str]
    ) -> dict[str, RealMatrix]:
        """One update over `names`; missing gradients count as zero."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        updated = {}
        for name in names:
            p = values[name].a
            g = grads.get_or_zero(name, p.shape)
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p - step - self.lr * self.weight_decay * p
            updated[name] = RealMatrix(new)
        return updated


class LinearDecaySgd:
    """SGD whose rate at step t is lr0 * (1 - t / total_steps)."""

    def __init__(self, lr: float, total_steps: int):
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        self.lr0 = lr
        self.total_steps = total_steps

    def rate(self, step: int) -> float:
        return self.lr0 * (1.0 - step / self.total_steps)

    def step(
        self,
        values: dict[str, RealMatrix],
        grads: GradBuffer,
        names: list[str],
        step_index: int,
    ) -> dict[str, RealMatrix]:
        eta = self.rate(step_index)
        updated = {}
        for name in names:
            p = values[name].a
            g = grads.get_or_zero(name, p.shape)
            updated[name] = RealMatrix(p - eta * g)
        return updated
