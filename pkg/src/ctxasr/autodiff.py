"""Minimal float64 reverse-mode autodiff over numpy arrays.

Every operation records its input tensors and a backward closure on the
tensor it produces, so each forward pass rebuilds the graph from scratch
(define-by-run). ``Tensor.backward()`` walks the recorded nodes once in
reverse topological order; gradients accumulate additively wherever a
value fans out, and leaves that do not reach the loss simply keep a zero
gradient.

Tensors are immutable once created (nothing here writes to ``data``), so
they are safe to share read-only. Graph construction and backward are
single-threaded per graph.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class EvaluationError(ValueError):
    """A function produced a non-finite value where finiteness is required."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional tape record.

    ``_inputs`` holds the tensors this one was computed from, ``_op`` a tag
    for debugging, and ``_backward`` a closure mapping the output gradient
    to one gradient per input (None for non-differentiable inputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_op", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._inputs: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar; the named functions below do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._op = op
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), "matmul", backward)


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _node(x.data * c, (x,), "scale", backward)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), "tanh", backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), "sigmoid", backward)


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _node(out, (x,), "exp", backward)


def log(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), "log", backward)


def mask(x, m) -> Tensor:
    """Multiply by a constant 0/1 (or arbitrary) array; gradient flows to x only."""
    x = _wrap(x)
    m = _as_array(m)
    try:
        data = x.data * m
    except ValueError as exc:
        raise ShapeError(f"mask: incompatible shapes {x.shape} and {m.shape}") from exc

    def backward(g):
        return (_unbroadcast(g * m, x.shape),)

    return _node(data, (x,), "mask", backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, parts, "concat", backward)


def take(x, key) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    x = _wrap(x)
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(np.array(data, copy=True), (x,), "take", backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    return take(table, ids)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _node(data, (x,), "reshape", backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _wrap(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _node(data, (x,), "transpose", backward)


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _node(data, (x,), "sum", backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), "log_softmax", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), "softmax", backward)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean, unit variance."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _node(y, (x,), "layer_norm", backward)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    """Register an externally computed value with a hand-written gradient.

    The loss lattices use this: their forward dynamic programs run in plain
    numpy and supply the analytic gradient as ``backward``.
    """
    return _node(_as_array(data), inputs, op, backward)


class Parameters:
    """Named leaf tensors of a model, in registration order."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._store:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; zeros for parameters the loss never touched."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._store.items()
        }

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._store.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._store.items():
            arr = _as_array(values[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  Per coordinate the error is
    |analytic - central| / max(1e-8, |central|); the maximum over all
    coordinates is returned.
    """
    x = _as_array(x)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function is non-finite at the evaluation point")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.ravel()
    num_flat = numeric.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(x)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(x)).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError("function is non-finite at a perturbed point")
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0


def grad_check_param(loss_fn, param: Tensor, eps: float = 1e-5) -> float:
    """grad_check for a leaf parameter of a model.

    ``loss_fn()`` must rebuild the loss graph from current parameter
    values; the analytic gradient is read off ``param.grad`` and compared
    against central differences taken by perturbing ``param.data`` in
    place. Same error metric as :func:`grad_check`.
    """
    param.grad = None
    out = loss_fn()
    if out.size != 1:
        raise ContractError("grad_check_param needs a scalar loss")
    if not np.isfinite(out.data).all():
        raise EvaluationError("loss is non-finite at the evaluation point")
    out.backward()
    analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
    analytic = analytic.copy()

    numeric = np.zeros_like(param.data)
    flat = param.data.ravel()
    num_flat = numeric.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError("loss is non-finite at a perturbed point")
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
