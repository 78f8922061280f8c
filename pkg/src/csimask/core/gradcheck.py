"""Central finite-difference verification of analytic gradients.

The harness is its own oracle: it compares reverse-mode gradients of a
scalar-valued function against central differences coordinate by
coordinate, in double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central diff| / max(1, |central diff|).

    ``fn`` must return a scalar Tensor; ``inputs`` should be float64 leaf
    tensors with ``requires_grad`` set on every argument to be checked.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("finite_difference_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite output in gradient check")
    out.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(np.array(t.grad, dtype=np.float64))

    def evaluate() -> float:
        val = fn(*inputs)
        if not np.isfinite(val.data).all():
            raise NonFiniteError("non-finite intermediate in gradient check")
        return float(val.data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(aflat[i] - num) / max(1.0, abs(num)))
    return worst
