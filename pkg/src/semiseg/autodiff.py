"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a thin numpy kernel plus a closure computing parent gradients.
Ops record onto the active :class:`Tape` only when at least one input
requires gradients, so inference code runs tape-free at numpy speed.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> float(x.grad[0])
    6.0
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_state = threading.local()


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors (e.g. float64 for grad checks)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording; ops inside behave as plain numpy."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # leaves own their buffer so in-place optimizer updates never alias caller arrays
        self.data = np.array(data, dtype=_dtype()) if requires_grad else np.asarray(data, dtype=_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; nodes are appended in execution order,
    which is a valid topological order by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    # leaf
                    pg = np.asarray(pg, dtype=parent.data.dtype)
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad = parent.grad + pg


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape (was it computed under Tape()?)")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    data = _check(np.asarray(data, dtype=_result_dtype(parents)), op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _result_dtype(parents):
    dt = None
    for p in parents:
        dt = p.data.dtype if dt is None else np.promote_types(dt, p.data.dtype)
    return dt if dt is not None else _dtype()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if not np.isscalar(p):
        raise TypeError("power only supports scalar exponents")

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, "power", (a,), bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics (no 1-D vector promotion on the left)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    a_vec, b_vec = a.ndim == 1, b.ndim == 1

    def bw(g):
        A = a.data[None, :] if a_vec else a.data
        B = b.data[:, None] if b_vec else b.data
        G = g
        if a_vec:
            G = np.expand_dims(G, -2)
        if b_vec:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            if a_vec:
                ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            if b_vec:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value; clamp with clamp_min first")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, "softplus", (a,), lambda g: (g * _np_sigmoid(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, lo: float = EPS) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    out = np.where(keep, a.data, np.asarray(lo, dtype=a.data.dtype))
    return _make(out, "clamp_min", (a,), lambda g: (g * keep,))


def huber(a, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: 0.5 x^2 for |x| <= delta, delta (|x| - 0.5 delta) beyond."""
    a = as_tensor(a)
    if delta <= 0:
        raise ValueError("huber delta must be > 0")
    x = a.data
    ax = np.abs(x)
    quad = ax <= delta
    out = np.where(quad, 0.5 * x * x, delta * (ax - 0.5 * delta))

    def bw(g):
        return (g * np.where(quad, x, delta * np.sign(x)),)

    return _make(out, "huber", (a,), bw)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions and normalizers


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), bw)


def l2_norm(a, axis: int = -1, keepdims: bool = True, eps: float = EPS) -> Tensor:
    """Euclidean norm along ``axis``, clamped below at ``eps``."""
    a = as_tensor(a)
    raw = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    live = raw >= eps
    out = np.where(live, raw, np.asarray(eps, dtype=raw.dtype))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * live * a.data / out,)

    return _make(out if keepdims else np.squeeze(out, axis), "l2_norm", (a,), bw)


def normalize(a, axis: int = -1, eps: float = EPS) -> Tensor:
    return div(a, l2_norm(a, axis=axis, keepdims=True, eps=eps))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, "getitem", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, "concat", ts, bw)


def neighborhoods(a, size: int = 3, dilation: int = 1) -> Tensor:
    """(B, H, W, C) -> (B, H, W, size*size*C): each cell's zero-padded
    size x size neighbourhood, offsets in row-major order. A convolution is
    this followed by a matmul."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"neighborhoods expects (B, H, W, C), got {a.shape}")
    if size % 2 == 0:
        raise ValueError("neighbourhood size must be odd")
    b, h, w, c = a.shape
    r = (size // 2) * dilation
    pad = np.pad(a.data, ((0, 0), (r, r), (r, r), (0, 0)))
    offs = [(i * dilation, j * dilation) for i in range(size) for j in range(size)]
    out = np.concatenate([pad[:, di : di + h, dj : dj + w] for di, dj in offs], axis=-1)

    def bw(g):
        gp = np.zeros_like(pad)
        for k, (di, dj) in enumerate(offs):
            gp[:, di : di + h, dj : dj + w] += g[..., k * c : (k + 1) * c]
        return (gp[:, r : r + h, r : r + w],)

    return _make(out, "neighborhoods", (a,), bw)


def repeat(a, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour style repetition along one axis (np.repeat)."""
    a = as_tensor(a)
    out = np.repeat(a.data, repeats, axis=axis)

    def bw(g):
        ax = axis % a.ndim
        shp = a.shape[:ax] + (a.shape[ax], repeats) + a.shape[ax + 1 :]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _make(out, "repeat", (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``inputs[index]``, in float64."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    x = base[index]
    g = np.zeros_like(x)
    with precision(np.float64), no_grad():
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = x[i]
            x[i] = old + h
            fp = float(fn(*[Tensor(b) for b in base]).data)
            x[i] = old - h
            fm = float(fn(*[Tensor(b) for b in base]).data)
            x[i] = old
            g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    with precision(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        with Tape() as tape:
            loss = fn(*leaves)
        tape.backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), floor)
    return num / den


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              wrt: Iterable[int] | None = None, joint: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``joint`` measures one error over all inputs concatenated, the right
    norm when the inputs are the parameter blocks of a single model.
    """
    grads = analytic_grads(fn, inputs)
    idx = list(range(len(inputs)) if wrt is None else wrt)
    if joint:
        num = [numeric_grad(fn, inputs, i, h).ravel() for i in idx]
        return relative_error(np.concatenate([grads[i].ravel() for i in idx]), np.concatenate(num))
    return max(relative_error(grads[i], numeric_grad(fn, inputs, i, h)) for i in idx)
