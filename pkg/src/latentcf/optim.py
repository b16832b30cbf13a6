"""Gradient-step optimizers for the package's small networks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[key] = self.beta1 * self._m[key] + (1.0 - self.beta1) * p.grad
            v = self._v[key] = self.beta2 * self._v[key] + (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
