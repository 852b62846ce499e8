"""RMSProp and the step learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import StateError
from .params import ParamSet


class RMSProp:
    """RMSProp with epsilon added outside the square root.

    ``acc <- alpha*acc + (1-alpha)*g^2``; ``p <- p - lr*g/(sqrt(acc)+eps)``.
    Gradients are left in place; zeroing them is the caller's job.
    """

    def __init__(self, params: ParamSet, lr: float = 4e-3, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.state: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }

    def step(self) -> None:
        missing = [name for name, t in self.params.items() if t.grad is None]
        if missing:
            raise StateError(f"rmsprop_step: no gradient for {', '.join(missing)}")
        a = self.alpha
        for name, t in self.params.items():
            g = t.grad
            acc = self.state[name]
            acc *= a
            acc += (1.0 - a) * g * g
            t.data -= (self.lr * g / (np.sqrt(acc) + self.eps)).astype(t.dtype)


def rmsprop_step(params: ParamSet, state: RMSProp) -> None:
    """Functional spelling of :meth:`RMSProp.step`."""
    if state.params is not params:
        raise StateError("optimizer state belongs to a different parameter set")
    state.step()


def step_lr(epoch: int, lr0: float = 4e-3, factor: float = 0.4, every: int = 40) -> float:
    """Learning rate at ``epoch`` for a drop-by-``factor``-every-``every`` schedule."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * factor ** math.floor(epoch / every)
