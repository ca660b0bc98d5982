"""Adam optimizer and the learning-rate decay schedule."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


def decayed_lr(base_lr: float, epoch: int, factor: float = 0.90) -> float:
    """Learning rate after ``epoch`` whole epochs: base * factor**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return float(base_lr) * float(factor) ** int(epoch)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    Moment buffers are kept per parameter in the parameter dtype. A
    parameter whose ``.grad`` is None after backward is treated as
    having a zero gradient. Non-finite gradients abort the step.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} does not require grad")
        self.lr = float(lr)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
