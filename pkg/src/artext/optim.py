"""Adam optimizer operating on Parameter objects.

State (first and second moments, step counter) lives on the parameters and in
the optimizer; both are serialized by the checkpoint writer so a resumed run
continues bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .nn import Parameter


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        if not self.params:
            raise UsageError("Adam: empty parameter list")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """One update; bias-corrected moments per the standard recurrences."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                raise UsageError("Adam.step: parameter has no gradient (run backward first)")
            g = p.grad
            if p.m is None:
                p.m = np.zeros_like(p.data)
                p.v = np.zeros_like(p.data)
            p.m *= b1
            p.m += (1.0 - b1) * g
            p.v *= b2
            p.v += (1.0 - b2) * (g * g)
            mhat = p.m / c1
            vhat = p.v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
