"""Adam with decoupled weight decay, and uniform Polyak averaging."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam (Kingma and Ba) with weight decay applied directly to the weights.

    Parameters named in ``no_decay`` are updated by Adam but never decayed.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, no_decay=()):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and name not in self.no_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PolyakAverage:
    """Equal-weight running mean of the parameters seen since it was started."""

    def __init__(self):
        self.count = 0
        self.mean: dict[str, np.ndarray] | None = None

    def update(self, params: dict[str, np.ndarray]) -> None:
        self.count += 1
        if self.mean is None:
            self.mean = {k: v.copy() for k, v in params.items()}
            return
        inv = 1.0 / self.count
        for k, v in params.items():
            self.mean[k] += (v - self.mean[k]) * inv

    def snapshot(self) -> dict[str, np.ndarray] | None:
        return None if self.mean is None else {k: v.copy() for k, v in self.mean.items()}
