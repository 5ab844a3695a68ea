"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Tape`` records primitive operations while active (context manager,
thread-local stack: distinct tapes may run on distinct threads, one tape
is single-threaded).  Outside any tape, the same ops run as plain numpy
with zero recording, producing bit-identical values, which is what lets
rollout code share one render implementation between traced gradient
descent and cheap forward-only evaluation.

Every primitive checks its output for NaN/Inf and raises
``NonFiniteError`` on the spot; silent non-finite values are treated as
corruption, not data.

Constants may be passed as plain ndarrays or Python scalars; they are
never recorded and receive no gradient.  Gradients accumulate in tape
order, so backward passes are deterministic.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class Node:
    __slots__ = ("output", "inputs", "vjp", "name")

    def __init__(self, output, inputs, vjp, name):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Append-only record of primitives, replayed in reverse by backward."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Dense float64 array plus the bookkeeping to reach it in backward.

    ``requires_grad`` marks an optimizable leaf.  ``tracked`` means a
    gradient can flow through this tensor to some leaf on the current
    tape; it is computed at construction and never revisited.
    """

    __slots__ = ("value", "requires_grad", "tracked", "grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tracked = self.requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> np.ndarray:
        """Value as a plain constant; do not mutate the result."""
        return self.value

    def __repr__(self):
        flags = "param" if self.requires_grad else ("tracked" if self.tracked else "const")
        return f"Tensor(shape={self.value.shape}, {flags})"

    # Arithmetic sugar; all routed through module-level primitives.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _unpack(x, tape_active: bool):
    if isinstance(x, Tensor):
        return x.value, (tape_active and x.tracked)
    return np.asarray(x, dtype=np.float64), False


def _finish(name: str, value: np.ndarray, inputs: tuple, vjp: Callable, any_tracked: bool) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"primitive '{name}' produced non-finite values")
    out = Tensor(value)
    if any_tracked:
        out.tracked = True
        _tape_stack()[-1].nodes.append(Node(out, inputs, vjp, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape an operand had before numpy
    broadcasting expanded it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise binary primitives
# ---------------------------------------------------------------------------

def add(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)

    def vjp(g):
        return (
            _unbroadcast(g, av.shape) if at else None,
            _unbroadcast(g, bv.shape) if bt else None,
        )

    return _finish("add", av + bv, (a, b), vjp, at or bt)


def sub(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)

    def vjp(g):
        return (
            _unbroadcast(g, av.shape) if at else None,
            _unbroadcast(-g, bv.shape) if bt else None,
        )

    return _finish("sub", av - bv, (a, b), vjp, at or bt)


def mul(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if at else None,
            _unbroadcast(g * av, bv.shape) if bt else None,
        )

    return _finish("mul", av * bv, (a, b), vjp, at or bt)


def div(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)

    def vjp(g):
        return (
            _unbroadcast(g / bv, av.shape) if at else None,
            _unbroadcast(-g * av / (bv * bv), bv.shape) if bt else None,
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _finish("div", out, (a, b), vjp, at or bt)


def neg(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return ((-g) if at else None,)

    return _finish("neg", -av, (a,), vjp, at)


def maximum(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)
    # Ties split the gradient evenly; exact ties are measure-zero for the
    # continuous inputs this library feeds through here.
    ga_mask = np.where(av > bv, 1.0, np.where(av == bv, 0.5, 0.0))

    def vjp(g):
        return (
            _unbroadcast(g * ga_mask, av.shape) if at else None,
            _unbroadcast(g * (1.0 - ga_mask), bv.shape) if bt else None,
        )

    return _finish("maximum", np.maximum(av, bv), (a, b), vjp, at or bt)


def minimum(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)
    ga_mask = np.where(av < bv, 1.0, np.where(av == bv, 0.5, 0.0))

    def vjp(g):
        return (
            _unbroadcast(g * ga_mask, av.shape) if at else None,
            _unbroadcast(g * (1.0 - ga_mask), bv.shape) if bt else None,
        )

    return _finish("minimum", np.minimum(av, bv), (a, b), vjp, at or bt)


# ---------------------------------------------------------------------------
# Elementwise unary primitives
# ---------------------------------------------------------------------------

def relu(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    mask = av > 0.0

    def vjp(g):
        return ((g * mask) if at else None,)

    return _finish("relu", av * mask, (a,), vjp, at)


def tanh(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    out = np.tanh(av)

    def vjp(g):
        return ((g * (1.0 - out * out)) if at else None,)

    return _finish("tanh", out, (a,), vjp, at)


def exp(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    with np.errstate(over="ignore"):
        out = np.exp(av)

    def vjp(g):
        return ((g * out) if at else None,)

    return _finish("exp", out, (a,), vjp, at)


def log(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(av)

    def vjp(g):
        return ((g / av) if at else None,)

    return _finish("log", out, (a,), vjp, at)


def sqrt(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(av)

    def vjp(g):
        return ((g * (0.5 / out)) if at else None,)

    return _finish("sqrt", out, (a,), vjp, at)


def square(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return ((g * (2.0 * av)) if at else None,)

    return _finish("square", av * av, (a,), vjp, at)


def sigmoid(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    # Stable on both tails: exp only ever sees non-positive arguments.
    out = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                   np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))

    def vjp(g):
        return ((g * out * (1.0 - out)) if at else None,)

    return _finish("sigmoid", out, (a,), vjp, at)


def softplus(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    out = np.logaddexp(0.0, av)

    def vjp(g):
        s = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                     np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
        return ((g * s) if at else None,)

    return _finish("softplus", out, (a,), vjp, at)


def sin(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return ((g * np.cos(av)) if at else None,)

    return _finish("sin", np.sin(av), (a,), vjp, at)


def cos(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return ((-g * np.sin(av)) if at else None,)

    return _finish("cos", np.cos(av), (a,), vjp, at)


def clamp(a, lo: float, hi: float):
    """Clip into [lo, hi]; gradient passes wherever the value was kept
    (boundary inclusive), zero where it was cut."""
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    mask = (av >= lo) & (av <= hi)

    def vjp(g):
        return ((g * mask) if at else None,)

    return _finish("clamp", np.clip(av, lo, hi), (a,), vjp, at)


# ---------------------------------------------------------------------------
# Linear algebra / reductions
# ---------------------------------------------------------------------------

def matmul(a, b):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    bv, bt = _unpack(b, active)
    if av.ndim > 2 or bv.ndim > 2 or av.ndim == 0 or bv.ndim == 0:
        raise ValueError(f"matmul supports 1-D/2-D operands, got {av.ndim}-D @ {bv.ndim}-D")
    out = av @ bv

    def vjp(g):
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape) if at else None
        gb = (a2.T @ g2).reshape(bv.shape) if bt else None
        return (ga, gb)

    return _finish("matmul", out, (a, b), vjp, at or bt)


def _restore_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return (_restore_reduced(g, av.shape, axis, keepdims).copy() if at else None,)

    return _finish("sum", av.sum(axis=axis, keepdims=keepdims), (a,), vjp, at)


def mean_(a, axis=None, keepdims=False):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= av.shape[ax]

    def vjp(g):
        return (
            (_restore_reduced(g, av.shape, axis, keepdims) / count) if at else None,
        )

    return _finish("mean", av.mean(axis=axis, keepdims=keepdims), (a,), vjp, at)


# ---------------------------------------------------------------------------
# Shape / indexing primitives
# ---------------------------------------------------------------------------

def broadcast_to(a, shape):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    out = np.ascontiguousarray(np.broadcast_to(av, shape))

    def vjp(g):
        return (_unbroadcast(g, av.shape) if at else None,)

    return _finish("broadcast", out, (a,), vjp, at)


def reshape(a, shape):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)

    def vjp(g):
        return (np.asarray(g).reshape(av.shape) if at else None,)

    return _finish("reshape", av.reshape(shape), (a,), vjp, at)


def transpose(a):
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    if av.ndim != 2:
        raise ValueError(f"transpose expects a 2-D operand, got shape {av.shape}")

    def vjp(g):
        return (np.ascontiguousarray(np.asarray(g).T) if at else None,)

    return _finish("transpose", np.ascontiguousarray(av.T), (a,), vjp, at)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis)))
        for p in parts
    )


def slice_(a, index):
    """Numpy indexing as a primitive: basic slices and integer-array gathers.

    The backward pass scatter-adds into a zero buffer, so repeated fancy
    indices accumulate correctly.
    """
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    out = av[index]
    basic = _is_basic_index(index)

    def vjp(g):
        if not at:
            return (None,)
        buf = np.zeros_like(av)
        if basic:
            buf[index] += g
        else:
            np.add.at(buf, index, g)
        return (buf,)

    return _finish("slice", np.ascontiguousarray(out), (a,), vjp, at)


def gather(a, idx):
    """Take rows of ``a`` along its first axis; ``idx`` may be any shape.

    Output shape is ``idx.shape + a.shape[1:]``; duplicate indices
    accumulate in backward (scatter-add).
    """
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    idx = np.asarray(idx)
    out = np.take(av, idx, axis=0)

    def vjp(g):
        if not at:
            return (None,)
        buf = np.zeros_like(av)
        np.add.at(buf, idx, np.asarray(g))
        return (buf,)

    return _finish("gather", out, (a,), vjp, at)


def concat(parts: Sequence, axis: int = 0):
    active = bool(_tape_stack())
    unpacked = [_unpack(p, active) for p in parts]
    values = [v for v, _ in unpacked]
    tracked = [t for _, t in unpacked]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.asarray(g)
        grads = []
        for i, t in enumerate(tracked):
            if not t:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return _finish("concat", out, tuple(parts), vjp, any(tracked))


def stack(parts: Sequence, axis: int = 0):
    active = bool(_tape_stack())
    unpacked = [_unpack(p, active) for p in parts]
    values = [v for v, _ in unpacked]
    tracked = [t for _, t in unpacked]
    out = np.stack(values, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        grads = []
        for i, t in enumerate(tracked):
            if not t:
                grads.append(None)
                continue
            grads.append(np.ascontiguousarray(np.take(g, i, axis=axis)))
        return tuple(grads)

    return _finish("stack", out, tuple(parts), vjp, any(tracked))


def avgpool2x2(a):
    """2x2 average pooling over the first two axes of (H, W) or (H, W, C)."""
    active = bool(_tape_stack())
    av, at = _unpack(a, active)
    if av.ndim not in (2, 3):
        raise ValueError(f"avgpool2x2 expects (H, W) or (H, W, C), got {av.shape}")
    h, w = av.shape[0], av.shape[1]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    pooled_shape = (h // 2, 2, w // 2, 2) + av.shape[2:]
    out = av.reshape(pooled_shape).mean(axis=(1, 3))

    def vjp(g):
        if not at:
            return (None,)
        g = np.asarray(g)
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25,)

    return _finish("avgpool2x2", out, (a,), vjp, at)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Accumulate d(root)/d(param) for every leaf in ``params``.

    Root must be scalar.  Leaves the computation never touched get a zero
    gradient of their own shape.  Results land in each param's ``.grad``
    and are returned in order.
    """
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not isinstance(inp, Tensor):
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = ig if acc is None else acc + ig
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.value)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(p.value.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("backward produced a non-finite gradient")
        p.grad = g
        out.append(g)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
