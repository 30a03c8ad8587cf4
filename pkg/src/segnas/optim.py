"""Optimizers and learning-rate schedules for the search and retrain loops."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base: float, final: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from base (epoch 0) to final (last epoch)."""
    if total_epochs <= 1:
        return base
    t = min(epoch, total_epochs - 1) / (total_epochs - 1)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * t))


def poly_lr(base: float, power: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        return base
    t = min(epoch, total_epochs - 1) / total_epochs
    return base * (1.0 - t) ** power


class SGDMomentum:
    """SGD with classical momentum and L2 weight decay folded into the grad."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)  # [(name, tensor)]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float) -> None:
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= lr * v

    def state_dict(self) -> dict:
        return {"velocity": {n: v.copy() for n, v in self.velocity.items()}}

    def load_state_dict(self, state: dict) -> None:
        for n, v in state["velocity"].items():
            self.velocity[n][...] = v


class Adam:
    """Adam with L2 weight decay added to the gradient (not decoupled)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for n, a in state["m"].items():
            self.m[n][...] = a
        for n, a in state["v"].items():
            self.v[n][...] = a
