"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`GradTape` whenever one of
their inputs requires a gradient. Implicit broadcasting is restricted to
scalars and trailing-dimension suffixes; anything else must go through
:func:`repeat`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "TapeError",
    "tensor",
    "parameter",
    "backward",
    "grad_check",
    "set_debug",
    "matmul",
    "log_sum_exp",
    "log_softmax",
    "softmax",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "softplus",
    "relu",
    "tanh",
    "clamp",
    "reshape",
    "transpose",
    "repeat",
    "concat",
    "stack",
    "sum",
    "mean",
    "custom_op",
]

_DEBUG = False
_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks on every operation output."""
    global _DEBUG
    _DEBUG = bool(enabled)


def _active_tape() -> "GradTape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of float64 values."""

    __slots__ = ("value", "requires_grad", "name", "_node", "__weakref__")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the reflected Tensor method

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; every operation executed inside the block whose
    inputs require gradients appends one node. Nodes are appended at creation,
    so inputs always precede the nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        # outputs lose their history, so they must not pose as parameter leaves later
        for node in self.nodes:
            node.output._node = None
            node.output.requires_grad = False
        self.nodes = []

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def _make(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result; ``vjp(g)`` returns one gradient (or None) per input."""
    out = Tensor(value)
    if _DEBUG and not np.all(np.isfinite(out.value)):
        raise FloatingPointError(f"non-finite values produced by {getattr(vjp, '__qualname__', 'op')}")
    if any(t.requires_grad for t in inputs):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            node = _Node(tuple(inputs), out, vjp)
            out._node = node
            tape.nodes.append(node)
    return out


def custom_op(value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Build a user-defined primitive from a forward value and a VJP rule."""
    return _make(np.asarray(value, dtype=np.float64), [_as_tensor(t) for t in inputs], vjp)


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every parameter leaf on ``tape``.

    The tape is cleared afterwards, whether or not a leaf was reachable.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not any(n is loss._node for n in tape.nodes):
        raise TapeError("loss is not recorded on this tape (detached or computed outside it)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves = tape.leaves()
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g)
        for inp, gi in zip(node.inputs, parts):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {leaf: grads.get(id(leaf), np.zeros_like(leaf.value)) for leaf in leaves}
    tape.clear()
    return result


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative discrepancy between tape gradients and central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = np.array(point.value if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = parameter(x0)
    with GradTape() as tape:
        out = f(leaf)
    if out.size != 1 or not np.isfinite(out.value).all():
        raise FloatingPointError("f must return a finite scalar at the check point")
    analytic = backward(tape, out)[leaf].reshape(-1)
    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = eps
        hi = f(Tensor((flat + step).reshape(x0.shape))).value
        lo = f(Tensor((flat - step).reshape(x0.shape))).value
        numeric[i] = float(hi - lo) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("f is not finite in the neighbourhood of the check point")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


# --- broadcasting ---------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    long_, short = (a, b) if len(a) >= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: only scalar or trailing-suffix broadcasting is allowed")
    return long_


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


# --- elementwise unary ----------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _softplus_np(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _make(_softplus_np(av), (a,), lambda g: (g * _sigmoid_np(av),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = _as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# --- linear algebra and reductions ----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axes), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axes) * (1.0 / count)


def log_sum_exp(a, axis: int = -1) -> Tensor:
    """Numerically stable ``log(sum(exp(a), axis))`` via max-shift."""
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("log_sum_exp over an empty axis")
    av = a.value
    m = av.max(axis=ax, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = (m + np.log(total)).squeeze(ax)
    weights = shifted / total

    def vjp(g):
        return (np.expand_dims(g, ax) * weights,)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    av = a.value
    m = av.max(axis=ax, keepdims=True)
    lse = m + np.log(np.exp(av - m).sum(axis=ax, keepdims=True))
    out = av - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=ax, keepdims=True),)

    return _make(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# --- shape manipulation ---------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.value.T, (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.value[index], (a,), vjp)


def repeat(a, n: int, axis: int = 0) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` (explicit broadcast)."""
    a = _as_tensor(a)
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.value, ax), n, axis=ax)
    return _make(out, (a,), lambda g: (g.sum(axis=ax),))


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([p.value for p in parts], axis=ax), parts, vjp)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % (parts[0].ndim + 1)

    def vjp(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _make(np.stack([p.value for p in parts], axis=ax), parts, vjp)
