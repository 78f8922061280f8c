"""Dense tensors with reverse-mode differentiation.

A deliberately small tape-based engine over numpy arrays: enough primitives
to express strided convolutions, transposed convolutions, affine maps,
normalizations, attention and the loss compositions built on top of them.
Gradients are accumulated on leaf tensors by ``Tensor.backward``.

Double precision is the reference mode (all gradient checks run in float64);
training runs in float32. Operations preserve the dtype of their inputs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus an optional backward closure.

    ``data`` is always a numpy array; ``grad`` (same shape) is populated by
    ``backward``. Non-leaf tensors also receive grads during a backward pass,
    which keeps the implementation simple and makes intermediate gradients
    inspectable in tests.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # ---- graph plumbing --------------------------------------------------

    def detach(self) -> "Tensor":
        """Forward identity that contributes no gradient (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # No in-place update: fan-in nodes may receive several contributions.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        """Reverse-mode sweep seeding ``grad`` (ones for a scalar output)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator overloads ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(".T is defined for 2-D tensors only")
        return transpose(self, (1, 0))


class Parameter(Tensor):
    """A named trainable tensor; the unit tracked by optimizers/checkpoints."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.asarray(data), requires_grad=True)
        # Parameters stay trainable even if constructed under no_grad.
        self.requires_grad = True
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _track(out: Tensor, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if _GRAD_ENABLED and parents:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        # float() keeps numpy scalars from upcasting float32 operands
        out = Tensor(t.data + float(s))
        return _track(out, (t,), lambda g, t=t: t._accumulate(g))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _track(out, (a, b), bw)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        out = Tensor(a.data - float(b))
        return _track(out, (a,), lambda g, a=a: a._accumulate(g))
    if isinstance(a, (int, float)):
        b = as_tensor(b)
        out = Tensor(float(a) - b.data)
        return _track(out, (b,), lambda g, b=b: b._accumulate(-g))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.data.shape))

    return _track(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        s = float(s)
        out = Tensor(t.data * s)
        return _track(out, (t,), lambda g, t=t, s=s: t._accumulate(g * s))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _track(out, (a, b), bw)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _track(out, (a, b), bw)


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _track(out, (a,), lambda g, a=a: a._accumulate(g * np.sign(a.data)))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _track(out, (a,), lambda g, a=a, o=out: a._accumulate(g * o.data))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _track(out, (a,), lambda g, a=a: a._accumulate(g / a.data))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _track(out, (a,), lambda g, a=a, o=out: a._accumulate(g * (0.5 / o.data)))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    return _track(out, (a,), lambda g, a=a: a._accumulate(g * (a.data > 0)))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _track(out, (a,), lambda g, a=a: a._accumulate(g * (2.0 * a.data)))


# ---- reductions and shape ops ---------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _track(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bw(g, a=a, axis=axis, keepdims=keepdims, n=float(n)):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, a.data.shape) / n)

    return _track(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _track(out, (a,), lambda g, a=a: a._accumulate(g.reshape(a.data.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _track(out, (a,), lambda g, a=a, inv=inv: a._accumulate(g.transpose(inv)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g, tensors=tensors, axis=axis, offsets=offsets):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _track(out, tensors, bw)


def getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def bw(g, a=a, key=key):
        z = np.zeros_like(a.data)
        z[key] += g
        a._accumulate(z)

    return _track(out, (a,), bw)


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; backward scatter-adds into the source."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = Tensor(np.take_along_axis(a.data, indices, axis=axis))

    def bw(g, a=a, indices=indices, axis=axis):
        z = np.zeros_like(a.data)
        if a.data.ndim == 1 and axis == 0:
            np.add.at(z, indices, g)
        elif a.data.ndim == 2 and axis == 1:
            rows = np.arange(a.data.shape[0])[:, None]
            np.add.at(z, (rows, indices), g)
        else:  # pragma: no cover - not exercised by this package
            raise DimensionError("take_along backward supports 1-D axis 0 and 2-D axis 1")
        a._accumulate(z)

    return _track(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors with ndim >= 2")
    out = Tensor(a.data @ b.data)

    def bw(g, a=a, b=b):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _track(out, (a, b), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on the forward pass, zero contribution on the backward pass."""
    return as_tensor(a).detach()
