"""SGD with classical momentum."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class SGD:
    """Momentum SGD over a name -> array mapping, updated in place.

    velocity <- momentum * velocity - lr * grad;  param <- param + velocity
    """

    def __init__(self, momentum: float = 0.9):
        if momentum < 0:
            raise ValueError("momentum must be non-negative")
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(
        self,
        params: Mapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lr: float,
    ) -> None:
        if set(params) != set(grads):
            missing = sorted(set(params) ^ set(grads))
            raise KeyError(f"parameter/gradient key mismatch: {missing}")
        for name in sorted(params):
            p = params[name]
            v = self.velocity.get(name)
            if v is None or v.shape != p.shape:
                v = np.zeros_like(p)
            v = self.momentum * v - lr * grads[name]
            self.velocity[name] = v
            p += v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.velocity = {k: np.array(v, dtype=np.float64) for k, v in state.items()}


def sgd_step(params, grads, learning_rate: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """Functional form: one update of ``params`` in place; returns the optimizer holding velocity."""
    opt = state if state is not None else SGD(momentum)
    opt.momentum = momentum
    opt.step(params, grads, learning_rate)
    return opt
