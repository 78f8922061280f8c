"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, MissingGradientError
from .tensor import Parameter


class AdamW:
    """Decoupled-weight-decay Adam over a group of named parameters.

    Update per step t (bias-corrected):
        p <- p * (1 - lr * wd)
        m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
        p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

    With lr=0 the step is the identity on parameters; with g=0 and wd=0 it
    is likewise the identity.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names in optimizer group: {dupes}")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}
        # scratch reused across parameters: keeps the step allocation-free
        self._largest = max((p.data.size for p in self.params), default=0)
        self._scratch: dict = {}

    def _scratch_for(self, p: Parameter) -> np.ndarray:
        buf = self._scratch.get(p.data.dtype)
        if buf is None:
            buf = np.empty(self._largest, dtype=p.data.dtype)
            self._scratch[p.data.dtype] = buf
        return buf[: p.data.size].reshape(p.data.shape)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m, v = self._m[p.name], self._v[p.name]
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            s = self._scratch_for(p)
            np.multiply(m, self.beta1, out=m)
            np.multiply(g, 1.0 - self.beta1, out=s)
            m += s
            np.multiply(g, g, out=s)
            s *= 1.0 - self.beta2
            np.multiply(v, self.beta2, out=v)
            v += s
            np.divide(v, bc2, out=s)
            np.sqrt(s, out=s)
            s += self.eps
            np.divide(m, s, out=s)
            s *= self.lr / bc1
            p.data -= s

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self._m.items()},
            "v": {k: a.copy() for k, a in self._v.items()},
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self._m:
            self._m[k][...] = state["m"][k]
            self._v[k][...] = state["v"][k]
