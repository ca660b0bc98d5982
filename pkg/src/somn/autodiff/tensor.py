"""Dense tensor with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for gradient
checking). The computation graph is rebuilt on every forward pass;
``backward`` walks it in reverse topological order and accumulates
gradients on leaf tensors. Reductions accumulate in 64-bit regardless
of storage dtype so gradient checks can hit tight tolerances.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericError

DEFAULT_DTYPE = np.float32

_STRICT_FINITE = False
_NO_GRAD = False


@contextlib.contextmanager
def strict_finite():
    """Check every op output for NaN/Inf within the block (slow; for tests)."""
    global _STRICT_FINITE
    prev = _STRICT_FINITE
    _STRICT_FINITE = True
    try:
        yield
    finally:
        _STRICT_FINITE = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph construction within the block (inference/feature extraction)."""
    global _NO_GRAD
    prev = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _STRICT_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """Node in the define-by-run graph.

    Leaf tensors (no parents) hold data and, after ``backward``, a
    gradient of identical shape. Interior nodes carry a vector-Jacobian
    closure used only during the backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = (not _NO_GRAD) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make_node(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make_node(a.data - b.data, (a, b), vjp, "sub")


def neg(a: Tensor) -> Tensor:
    return _make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make_node(a.data * b.data, (a, b), vjp, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make_node(a.data * np.asarray(s, dtype=a.dtype), (a,), lambda g: (g * s,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes.

    Supported shapes: both operands 2D, both with identical leading
    (batch) dims, or a batched left operand against a 2D right operand
    (the linear-layer case).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must have >= 2 dims, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ValueError(f"matmul: unsupported broadcast {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims disagree, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul: mixed dtypes {a.dtype} and {b.dtype}")

    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (ga, gb)

    return _make_node(out, (a, b), vjp, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make_node(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make_node(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp, "transpose")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with 64-bit accumulation, cast back to the storage dtype."""
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _make_node(out, (a,), vjp, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    s = tensor_sum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return _make_node(np.concatenate([t.data for t in parts], axis=axis), tuple(parts), vjp, "concat")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-accumulate gradients from a scalar loss.

    Gradients add into ``.grad`` of every reachable leaf, so repeated
    calls without ``zero_grad`` accumulate. Leaves listed in ``params``
    that the graph does not reach receive explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("backward called on a non-finite loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
