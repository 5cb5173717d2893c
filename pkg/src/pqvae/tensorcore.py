"""
Dense float64 tensors with a dynamic reverse-mode tape, plus AdamW.

Only the operations the autoencoder needs are provided: affine maps,
elementwise arithmetic with broadcasting, ELU/Tanh, reductions, reshapes,
column slicing/concatenation, row gathers and stop-gradient.

Example
-------
>>> x = Tensor([1.0, -2.0], requires_grad=True)
>>> loss = (x * x).sum()
>>> backward(loss)
>>> x.grad
array([ 2., -4.])
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf reaches a place that must stay finite."""


def _as_array(value) -> np.ndarray:
    # no copy for float64 arrays: op results are fresh and parameters are owned
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that records how it was produced.

    Leaves created by the user carry ``requires_grad``; every op result
    keeps references to its parents and a closure that pushes the output
    gradient back to them.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Evaluate without recording the tape (inference and metric passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), _bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        x._accumulate(2.0 * x.data * g)

    return _make(x.data * x.data, (x,), _bw)


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    x = as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, np.expm1(np.minimum(x.data, 0.0)), x.data)

    def _bw(g):
        x._accumulate(g * np.where(neg, out + 1.0, 1.0))

    return _make(out, (x,), _bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def _bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), _bw)


ACTIVATIONS = {"elu": elu, "tanh": tanh}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unsupported activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; the result is a fresh leaf so nothing flows back."""
    return Tensor(as_tensor(x).data.copy())


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out, (a, b), _bw)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for x of shape [B, in], W [in, out], b [out]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine expects x[B,in], W[in,out], b[out]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine input width {x.shape[1]} does not match weight rows {W.shape[0]}")
    if W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine weight columns {W.shape[1]} do not match bias length {b.shape[0]}")
    out = x.data @ W.data + b.data

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out, (x, W, b), _bw)


# -- reductions and reshaping ---------------------------------------------------
def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), _bw)


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def _bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.array(x.data.sum() / n), (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def _bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), _bw)


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    basic = all(isinstance(k, (slice, int)) for k in (key if isinstance(key, tuple) else (key,)))

    def _bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        x._accumulate(full)

    return _make(np.array(out), (x,), _bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(out, parts, _bw)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array; gradients scatter-add back."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        table._accumulate(full)

    return _make(out, (table,), _bw)


# -- backward -------------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Leaves accumulate across calls (call ``zero_grad`` between steps);
    interior nodes are reset first, so replaying the same graph gives the
    same leaf gradients bitwise.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {float(loss.data)}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- AdamW ----------------------------------------------------------------------
@dataclass
class AdamWHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[np.ndarray]) -> "AdamWState":
        params = [np.asarray(p) for p in params]
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState,
               hyper: AdamWHyper) -> None:
    """One in-place AdamW update with bias correction and decoupled decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs grad {g.shape} vs state {state.m[i].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {i}; step skipped")
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if hyper.weight_decay:
            p -= hyper.lr * hyper.weight_decay * p
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    state.step = t


class AdamW:
    """Optimizer over Tensor leaves; reads ``.grad`` and writes ``.data``."""

    def __init__(self, params: Sequence[Tensor], hyper: AdamWHyper | None = None):
        self.params = list(params)
        self.hyper = hyper or AdamWHyper()
        self.state = AdamWState.zeros_like(p.data for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, self.hyper)
