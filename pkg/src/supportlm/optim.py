"""Parameter-update rules for training and for stationary head fits.

Two modes. Plain gradient descent applies theta <- theta - lr * (grad +
2*lam*theta), which is exactly the negative gradient of the L2-regularized
loss; analyses that lean on stationarity use this mode. The adaptive mode is
Adam with decoupled weight decay for full-model training, where stationarity
of the regularized loss is treated as approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PlainGD:
    lr: float
    lam: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("weight-decay coefficient must be non-negative")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
            p -= self.lr * (g + 2.0 * self.lam * p)
        self.step_count += 1


@dataclass
class Adam:
    lr: float
    lam: float = 0.0  # decoupled decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("weight-decay coefficient must be non-negative")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        b1c = 1.0 - self.beta1**t
        b2c = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.lam:
                update = update + self.lam * p
            p -= self.lr * update


def make_optimizer(kind: str, lr: float, lam: float = 0.0):
    if kind == "plain-gd":
        return PlainGD(lr=lr, lam=lam)
    if kind == "adam":
        return Adam(lr=lr, lam=lam)
    raise ValueError(f"unknown optimizer kind {kind!r}")
