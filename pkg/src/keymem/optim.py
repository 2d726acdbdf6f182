from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place.

    Parameters are addressed by name; only names passed to ``step`` move.
    Vectors (biases, norm gains) are not decayed.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, clip=1.0):
        if lr <= 0 or eps <= 0:
            raise ValueError("learning rate and epsilon must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip = clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        self.t += 1
        names = [n for n in params if n in grads]
        norm = float(np.sqrt(sum(float((grads[n] ** 2).sum()) for n in names)))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n in names:
            p, g = params[n], grads[n] * scale
            if n not in self.m:
                self.m[n] = np.zeros_like(p)
                self.v[n] = np.zeros_like(p)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and p.ndim > 1:
                p *= 1.0 - self.lr * self.wd
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
