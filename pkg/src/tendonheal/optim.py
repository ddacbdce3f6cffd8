"""First-order optimizers: plain SGD, SGD with momentum, and Adam.

Update rules (``g`` is the gradient, ``t`` the step count after increment)::

    sgd       p <- p - lr * g
    momentum  v <- momentum * v + g;  p <- p - lr * v
    adam      m <- b1 * m + (1 - b1) * g
              v <- b2 * v + (1 - b2) * g**2
              p <- p - lr * (m / (1 - b1**t)) / (sqrt(v / (1 - b2**t)) + eps)
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor

KINDS = ("sgd", "momentum", "adam")


class Optimizer:
    """Optimizer state bound to a set of named parameters.

    Moment buffers exist only for the kinds that need them: ``velocity`` for
    momentum, ``first_moment``/``second_moment`` for Adam.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        kind: str = "adam",
        learning_rate: float = 1e-3,
        momentum: float = 0.9,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}; expected one of {KINDS}")
        if not learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        for label, value in (("momentum", momentum), ("beta1", beta1), ("beta2", beta2)):
            if not 0 <= value < 1:
                raise ValueError(f"{label} must lie in [0, 1), got {value}")
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.params = dict(params)
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.velocity: dict[str, np.ndarray] = {}
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            if kind == "momentum":
                self.velocity[name] = np.zeros_like(p.data)
            elif kind == "adam":
                self.first_moment[name] = np.zeros_like(p.data)
                self.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            if p.grad.shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: gradient shape {p.grad.shape} != {p.data.shape}")
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if self.kind == "sgd":
                p.data -= self.learning_rate * g
            elif self.kind == "momentum":
                v = self.velocity[name]
                v *= self.momentum
                v += g
                p.data -= self.learning_rate * v
            else:
                m, v = self.first_moment[name], self.second_moment[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def hyperparameters(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        }
