"""SGD with Nesterov momentum, cosine annealing, and Adam (used by probes)."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * step / total))."""
    if lr0 <= 0:
        raise ValueError(f"initial learning rate must be positive, got {lr0}")
    if total <= 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """Momentum SGD with the usual framework conventions.

    ``g = grad + wd * p;  buf = m * buf + g;  p -= lr * (g + m * buf)`` when
    Nesterov, ``p -= lr * buf`` otherwise.  With ``momentum=0`` the first form
    reduces to plain gradient descent.
    """

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, nesterov: bool = True,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.bufs = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        m, wd = self.momentum, self.weight_decay
        for i, p in enumerate(self.params):
            g = p.grad
            if wd:
                g = g + wd * p.data
            if m:
                buf = self.bufs[i]
                buf = g.copy() if buf is None else m * buf + g
                self.bufs[i] = buf
                g = g + m * buf if self.nesterov else buf
            p.data -= lr * g

    def state(self) -> list:
        return [None if b is None else b.copy() for b in self.bufs]


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
