"""Parameter-dict optimizers for the taped tensors.

Parameters live in flat ``dict[str, Tensor]`` containers with dotted
names (the same names the checkpoint manifests use). Both steppers read
``grad``, update ``data`` in place, and clear the gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    for t in params.values():
        if t.grad is None:
            continue
        t.data -= lr * t.grad
        t.grad = None


class Adam:
    """Standard Adam with bias correction, keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - b1) * (p.grad - m)
            v += (1.0 - b2) * (p.grad**2 - v)
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None
