"""Adaptive moment estimation (bias-corrected) over autograd tensors."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


class MissingGradientError(RuntimeError):
    """step() called while some managed parameter has no gradient."""


class Adam:
    """Adam with bias correction; moments live in the parameter dtype.

    step() consumes the ``.grad`` slots populated by ``backward`` and
    updates parameter data in place; call ``zero_grad`` between steps.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(
                    f"parameter {i} (shape {list(p.shape)}) has no gradient")
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
