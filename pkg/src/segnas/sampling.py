"""Gumbel-softmax relaxation of categorical architecture choices.

A softened one-hot mask is softmax((logits + G) / temperature) with
G = -log(-log(U)), U ~ Uniform(0, 1).  The noise is treated as a constant
under differentiation (reparameterization), so gradients flow to the
logits through the softmax only.  Fresh noise is drawn once per edge per
forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, TensorError, add_const, scale, softmax1d

_U_CLIP = 1e-12  # keeps -log(-log(U)) finite at the stream's extremes


class GumbelSampler:
    """Seeded noise source with a current softmax temperature.

    Single-owner: clone with a derived seed instead of sharing.
    """

    def __init__(self, seed: int, temperature: float = 1.0):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.set_temperature(temperature)

    def set_temperature(self, temperature: float) -> None:
        if not temperature > 0:
            raise TensorError(f"temperature must be positive, got {temperature}")
        self.temperature = float(temperature)

    def gumbel(self, n: int) -> np.ndarray:
        u = np.clip(self.rng.random(n), _U_CLIP, 1.0 - _U_CLIP)
        return -np.log(-np.log(u))

    def state(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state, "temperature": self.temperature}

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["bit_generator"]
        self.temperature = float(state["temperature"])


def gumbel_softmax(log_alpha: Tensor, sampler: GumbelSampler, noise: np.ndarray | None = None) -> Tensor:
    """Sample a softened one-hot mask from architecture logits.

    Differentiable w.r.t. log_alpha; `noise` can be injected for tests.
    """
    if log_alpha.data.ndim != 1 or log_alpha.data.shape[0] < 2:
        raise TensorError(f"gumbel_softmax needs a vector of length >= 2, got shape {log_alpha.data.shape}")
    if not np.all(np.isfinite(log_alpha.data)):
        raise TensorError("gumbel_softmax on non-finite logits")
    g = sampler.gumbel(log_alpha.data.shape[0]) if noise is None else np.asarray(noise, dtype=np.float64)
    return softmax1d(scale(add_const(log_alpha, g), 1.0 / sampler.temperature))


def expected_mask(log_alpha) -> np.ndarray:
    """Plain softmax of the logits: the mask's expectation proxy.

    Logging/diagnostics only; never part of the training path.
    """
    arr = log_alpha.data if isinstance(log_alpha, Tensor) else np.asarray(log_alpha, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorError("expected_mask on non-finite logits")
    z = arr - np.max(arr)
    e = np.exp(z)
    return e / e.sum()


class TemperatureSchedule:
    """Exponential anneal from `initial` at epoch 0 to `minimum` at epoch `total`."""

    def __init__(self, initial: float = 3.0, minimum: float = 0.03, total_epochs: int = 1):
        if not (initial >= minimum > 0):
            raise TensorError(f"bad temperature schedule: initial={initial}, minimum={minimum}")
        if total_epochs < 1:
            raise TensorError("total_epochs must be >= 1")
        self.initial = float(initial)
        self.minimum = float(minimum)
        self.total_epochs = int(total_epochs)

    def at(self, epoch: int) -> float:
        if epoch < 0:
            raise TensorError("epoch must be >= 0")
        frac = min(epoch / self.total_epochs, 1.0)
        lam = self.initial * math.pow(self.minimum / self.initial, frac)
        return max(lam, self.minimum)
