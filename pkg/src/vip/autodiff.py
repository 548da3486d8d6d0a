"""Dense tensors with define-by-run reverse-mode differentiation.

Storage is a numpy array (float32 by default, float64 on request). Every
operation on a tensor that requires gradients records its parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks that graph in reverse topological order. Reductions and products
accumulate in float64 and round back to the tensor's dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """The graph cannot be differentiated as requested."""


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    of the same shape; interior nodes keep gradients only transiently while
    :func:`backward` runs.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], tuple]] = None,
        _op: str = "",
    ):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        self.grad: Optional[np.ndarray] = None
        if self.requires_grad and _backward is None:
            self.grad = np.zeros_like(self.data)

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.dtype for t in ts))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    """Wrap an op result; record graph edges only when a parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=np.float64).astype(grad.dtype)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    dtype = _result_dtype(a, b)
    out = (a.data + b.data).astype(dtype, copy=False)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    dtype = _result_dtype(a, b)
    out = (a.data - b.data).astype(dtype, copy=False)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    dtype = _result_dtype(a, b)
    out = (a.data * b.data).astype(dtype, copy=False)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = (a.data * s).astype(a.dtype, copy=False)

    def backward(g):
        return ((g * s).astype(g.dtype, copy=False),)

    return _make(out, (a,), backward, "mul_scalar")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where ``lo <= a <= hi``."""
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (np.where(mask, g, 0).astype(g.dtype, copy=False),)

    return _make(out, (a,), backward, "clip")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(a.dtype, copy=False)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return ((g * d).astype(g.dtype, copy=False),)

    return _make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``m x k`` and a ``k x n`` tensor.

    The product is formed in float64 and rounded to the operands' dtype.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    dtype = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = (a64 @ b64).astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        ga = (g64 @ b64.T).astype(a.dtype) if a.requires_grad else None
        gb = (a64.T @ g64).astype(b.dtype) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by the row maximum."""
    x64 = x.data.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=-1, keepdims=True)
        return ((y64 * (g64 - dot)).astype(g.dtype),)

    return _make(y, (x,), backward, "softmax_rows")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match last dim {n}"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    g64 = gain.data.astype(np.float64)
    out = (xhat * g64 + bias.data).astype(_result_dtype(x, gain, bias))

    def backward(g):
        gr = g.astype(np.float64)
        dxhat = gr * g64
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(gr.ndim - 1))
        dgain = (gr * xhat).sum(axis=lead)
        dbias = gr.sum(axis=lead)
        return dx.astype(x.dtype), dgain.astype(gain.dtype), dbias.astype(bias.dtype)

    return _make(out, (x, gain, bias), backward, "layernorm")


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------

def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), backward, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (x,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(start), int(stop))
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, backward, "concat")


def take(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing, ``x[key]``; duplicate indices accumulate."""
    try:
        out = np.array(x.data[key], copy=True)
    except IndexError as exc:
        raise IndexError(f"index {key!r} out of range for shape {x.shape}") from exc

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (x,), backward, "take")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return take(x, slice(start, stop))


def gather_rows(x: Tensor, index: Iterable[int]) -> Tensor:
    idx = _checked_index(index, x.shape[0], "gather_rows")
    return take(x, idx)


def gather_columns(x: Tensor, index: Iterable[int]) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"gather_columns: expected a matrix, got shape {x.shape}")
    idx = _checked_index(index, x.shape[1], "gather_columns")
    return take(x, (slice(None), idx))


def _checked_index(index: Iterable[int], size: int, op: str) -> np.ndarray:
    idx = np.asarray(list(index), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"{op}: indices {idx.tolist()} out of range [0, {size})")
    return idx


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _make(out, (x,), backward, "sum_all")


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a matrix; the gradient at a zero row is zero."""
    if x.ndim != 2:
        raise DimensionError(f"l2_norm_rows: expected a matrix, got shape {x.shape}")
    x64 = x.data.astype(np.float64)
    norms = np.sqrt((x64 * x64).sum(axis=1))
    out = norms.astype(x.dtype)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g.astype(np.float64) / safe, 0.0)
        return ((x64 * scale[:, None]).astype(x.dtype),)

    return _make(out, (x,), backward, "l2_norm_rows")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that carry gradients, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every ``requires_grad`` leaf.

    Raises:
        GraphError: ``loss`` is not a single-element tensor.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float,
                       indices: Optional[Iterable] = None) -> np.ndarray:
    """Central finite differences of a scalar function at ``x``.

    Only the flat positions in ``indices`` are probed (all of them by default);
    the others are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
