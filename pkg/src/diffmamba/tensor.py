"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on creation.  ``backward``
collects the nodes reachable from the output and replays them in exact reverse
execution order (by creation sequence number), which is the computation tape.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

_SEQ = itertools.count()
_GRAD_ENABLED = True

_FLOAT_TYPES = (np.float32, np.float64)


@contextmanager
def no_grad():
    """Disable node recording inside the block (evaluation / inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("seq", "name", "inputs", "backward")

    def __init__(self, name: str, inputs: tuple, backward: Callable):
        self.seq = next(_SEQ)
        self.name = name
        self.inputs = inputs
        self.backward = backward


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, name: str, inputs: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out._node = None
        needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        out.requires_grad = needs
        if needs:
            out._node = _Node(name, inputs, backward)
        return out

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- properties -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        src = self.data.dtype

        def bw(g):
            return (g.astype(src),)

        return Tensor._make(self.data.astype(dtype), "astype", (self,), bw)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None) -> "ComputationTape":
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = ComputationTape.from_root(self)
        tape.run(self, np.asarray(grad, dtype=self.dtype))
        return tape

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, "add", (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, "sub", (a, b), bw)

    def __rsub__(self, other):
        return _wrap(other, self.dtype).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, "mul", (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            return (
                unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, "div", (a, b), bw)

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype).__truediv__(self)

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, "neg", (a,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self
        p = float(p)

        def bw(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._make(a.data**p, "pow", (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other, self.dtype), self)

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ---------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            np.ascontiguousarray(a.data.transpose(axes)),
            "transpose",
            (a,),
            lambda g: (g.transpose(inv),),
        )

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, i: int, j: int):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(axes)

    def broadcast_to(self, shape):
        a = self
        shape = tuple(shape)
        return Tensor._make(
            np.broadcast_to(a.data, shape).copy(),
            "broadcast_to",
            (a,),
            lambda g: (unbroadcast(g, a.shape),),
        )

    def __getitem__(self, idx):
        a = self

        def bw(g):
            out = np.zeros_like(a.data)
            if _is_advanced(idx):
                np.add.at(out, idx, g)
            else:
                out[idx] += g
            return (out,)

        return Tensor._make(np.array(a.data[idx]), "getitem", (a,), bw)

    # -- elementwise functions (thin wrappers around functional.pointwise) ----
    def exp(self):
        from .functional import pointwise

        return pointwise("exp", self)

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))

    def clip(self, lo: float, hi: float):
        a = self

        def bw(g):
            return (g * ((a.data >= lo) & (a.data <= hi)),)

        return Tensor._make(np.clip(a.data, lo, hi), "clip", (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else x.astype(dtype)
    return Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._make(out, "matmul", (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


class ComputationTape:
    """Ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes  # execution order

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[_Node] = []
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    @property
    def ops(self) -> list[str]:
        return [n.name for n in self.nodes]

    def run(self, root: Tensor, grad: np.ndarray) -> list[str]:
        """Propagate ``grad`` from ``root``; returns op names in visit order."""
        visited: list[str] = []
        if root._node is None:
            if root.requires_grad:
                root.grad = grad.copy() if root.grad is None else root.grad + grad
            return visited
        pending: dict[int, np.ndarray] = {id(root._node): grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            visited.append(node.name)
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    gi = np.asarray(gi, dtype=t.dtype)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t._node)
                    pending[key] = gi if key not in pending else pending[key] + gi
        self.visited = visited
        return visited


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
