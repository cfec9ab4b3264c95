"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array. Every differentiable operation records its parents
and a closure mapping the output gradient to parent gradients. ``backward``
walks the recorded nodes in reverse creation order, so the accumulation order
is fixed and repeated runs are bitwise identical.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

_creation_counter = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class GraphError(RuntimeError):
    """Raised on misuse of the operation graph (non-scalar or repeated backward)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class ShapeError(ValueError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None:
        if np.issubdtype(data.dtype, np.floating):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the operation graph.

    Floating numpy arrays keep their dtype; anything else is converted to
    float32 unless ``dtype`` is given. Use ``dtype=np.float64`` for
    verification work.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._op = "leaf"
        self._seq = next(_creation_counter)
        self._consumed = False

    # -- construction -------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"operation '{op}' produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._seq = next(_creation_counter)
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic properties ---------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            if node._consumed:
                raise GraphError("graph contains nodes from a consumed backward pass")
            nodes[id(node)] = node
            stack.extend(node._parents)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward_fn = None
            node._parents = ()
            node._consumed = True

    # -- operators ----------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)

    def abs(self) -> "Tensor":
        return absolute(self)

    def square(self) -> "Tensor":
        return square(self)

    def relu(self) -> "Tensor":
        return relu_max(self, 0.0)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _pair(a, b) -> tuple:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise -------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def absolute(x: Tensor) -> Tensor:
    """|x|; the gradient at 0 is taken as 0."""

    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._from_op(np.abs(x.data), (x,), backward, "abs")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return Tensor._from_op(x.data * x.data, (x,), backward, "square")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)

    def backward(g):
        return (g * out_data,)

    return Tensor._from_op(out_data, (x,), backward, "exp")


def relu_max(x: Tensor, threshold: float = 0.0) -> Tensor:
    """max(x - threshold, 0). Zero gradient wherever x <= threshold."""
    active = x.data > threshold
    out_data = np.maximum(x.data - np.asarray(threshold, dtype=x.dtype), 0)

    def backward(g):
        return (g * active,)

    return Tensor._from_op(out_data, (x,), backward, "relu_max")


def relu(x: Tensor) -> Tensor:
    return relu_max(x, 0.0)


# -- linear algebra / shape ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return Tensor._from_op(x.data.T, (x,), backward, "transpose")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; gradients scatter-add back to the source."""
    out_data = x.data[index]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data, dtype=x.dtype)
    else:
        out_data = out_data.copy()

    unique = _is_unique_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if unique:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out_data, (x,), backward, "take")


def _is_unique_index(index) -> bool:
    """Sufficient test that ``index`` never selects the same cell twice."""
    parts = index if isinstance(index, tuple) else (index,)
    if all(isinstance(p, (int, np.integer, slice)) for p in parts):
        return True
    lead = np.asarray(parts[0]) if not isinstance(parts[0], slice) else None
    return (
        lead is not None
        and lead.ndim == 1
        and np.issubdtype(lead.dtype, np.integer)
        and bool(np.all(np.diff(lead) > 0))
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward, "concat")


# -- reductions ----------------------------------------------------------------


def reduce(x: Tensor, kind: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axis`` (None reduces everything)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(a % x.ndim for a in axes) if x.ndim else ()
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if x.size == 0 or count == 0:
        raise ValueError(f"reduction over zero elements (shape {x.shape}, axis {axis})")

    if kind == "sum":
        out_data = x.data.sum(axis=axes, keepdims=keepdims)
    else:
        out_data = x.data.mean(axis=axes, keepdims=keepdims)
    out_data = np.asarray(out_data, dtype=x.dtype)
    scale = 1.0 if kind == "sum" else 1.0 / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, x.shape)
        return ((g * scale).astype(x.dtype, copy=False),)

    return Tensor._from_op(out_data, (x,), backward, kind)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out_data, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out_data, (x,), backward, "log_softmax")


# -- convolution ---------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    cols = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(k) for dx in range(k)]
    return np.concatenate(cols, axis=-1)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1, same-padded convolution in NHWC layout.

    ``weight`` has shape (k, k, C_in, C_out) with odd k.
    """
    b_, h, w, cin = x.shape
    k, k2, wcin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {weight.shape}")
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    pad = k // 2
    if pad:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = _im2col(xp, k, h, w).reshape(-1, k * k * cin)
    else:
        cols = x.data.reshape(-1, cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b_, h, w, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if pad:
                dcols = dcols.reshape(b_, h, w, k * k, cin)
                dxp = np.zeros((b_, h + 2 * pad, w + 2 * pad, cin), dtype=x.dtype)
                for i in range(k * k):
                    dy, dx = divmod(i, k)
                    dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, i, :]
                gx = dxp[:, pad:pad + h, pad:pad + w, :]
            else:
                gx = dcols.reshape(x.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, backward, "conv2d")
