"""Dense NumPy tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds its output through ``_make``, which
attaches the parent tensors and a closure mapping the upstream gradient to
one gradient per parent. ``Tape.record`` orders the reachable graph
topologically and ``Tape.backward`` replays it in reverse, visiting every
operation exactly once.

Gradients accumulate into ``Tensor.grad`` of leaf tensors; callers zero them
between optimisation steps.
"""

from __future__ import annotations

import contextlib
import functools
import struct
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def precision_dtype(bits: int) -> type:
    if bits == 32:
        return np.float32
    if bits == 64:
        return np.float64
    raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation and optimiser updates)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float array that may take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        Tape.record(self).backward(self, grad)

    # operator sugar
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A leaf tensor owned by a module; trainable unless frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if root.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
            grad = np.ones_like(root.data)
        if not root.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# --------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # Python/NumPy constants adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = fast_sum(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = fast_sum(grad, axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


@functools.lru_cache(maxsize=512)
def _ones(n: int, dtype) -> np.ndarray:
    out = np.ones(n, dtype=dtype)
    out.setflags(write=False)  # shared between calls
    return out


def fast_sum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """``np.sum`` routed through BLAS for leading or trailing axes.

    Ufunc reductions over short axes are an order of magnitude slower than a
    matrix-vector product with a ones vector.
    """
    if axis is None or x.ndim == 0:
        return np.sum(x, axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    axes = tuple(sorted(a % x.ndim for a in axes))
    if not axes:
        return x
    lead = len(axes)
    if axes == tuple(range(lead)):
        rest = x.shape[lead:]
        n = int(np.prod(x.shape[:lead]))
        out = (_ones(n, x.dtype) @ x.reshape(n, -1)).reshape(rest)
    elif axes == (x.ndim - 1,):
        out = x @ _ones(x.shape[-1], x.dtype)
    else:
        return np.sum(x, axis=axes, keepdims=keepdims)
    if keepdims:
        out = out.reshape(tuple(1 if i in axes else n for i, n in enumerate(x.shape)))
    return out


def fast_max(x: np.ndarray, axis: int) -> np.ndarray:
    """Maximum along ``axis`` with keepdims, by pairwise ``np.maximum``."""
    moved = np.moveaxis(x, axis, 0)
    if moved.shape[0] > 64:
        return np.expand_dims(moved.max(axis=0), axis)
    out = moved[0].copy()
    for i in range(1, moved.shape[0]):
        np.maximum(out, moved[i], out=out)
    return np.expand_dims(out, axis)


def _mask_bias(mask, x: Tensor, axis: int) -> np.ndarray:
    """Additive 0 / -inf bias in the mask's own (broadcastable) shape."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if mask.ndim < x.ndim:
        mask = mask.reshape((1,) * (x.ndim - mask.ndim) + mask.shape)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    if mask.ndim > x.ndim:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}")
    if not mask.any(axis=axis).all():
        raise DegenerateInputError("every element of a reduced slice is masked")
    return np.where(mask, 0.0, -np.inf).astype(x.dtype)


def _mask_array(mask, x: Tensor, axis: int) -> np.ndarray:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    if not mask.any(axis=axis).all():
        raise DegenerateInputError("every element of a reduced slice is masked")
    return mask


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * keep,), "relu")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace positions where ``mask`` is true by a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),),
                 "masked_fill")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; ``weight`` is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        np.add(out, bias.data, out=out)
    out = out.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, fast_sum(g2, axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),),
                 "transpose")


def permute(a: Tensor, shape_in=None, axes=None, shape_out=None) -> Tensor:
    """Reshape to ``shape_in``, transpose by ``axes``, reshape to ``shape_out``.

    One graph node for the split/merge-heads idiom; any step may be omitted.
    """
    data = a.data if shape_in is None else a.data.reshape(shape_in)
    if axes is not None:
        data = np.transpose(data, axes)
    perm_shape = data.shape
    if shape_out is not None:
        data = data.reshape(shape_out)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        g = g.reshape(perm_shape)
        if inverse is not None:
            g = np.transpose(g, inverse)
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward, "permute")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = _norm_axis(axis, a.ndim)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        if axis == 0 and indices.ndim == 1:
            # scatter-add as a one-hot matrix product
            n = a.shape[0]
            onehot = np.zeros((n, len(indices)), dtype=g.dtype)
            onehot[indices, np.arange(len(indices))] = 1
            return ((onehot @ g.reshape(len(indices), -1)).reshape(a.shape),)
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: {shape} and {t.shape} differ")
    axis = _norm_axis(axis, len(shape) + 1)
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# --------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = fast_sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a: Tensor, axis: int, mask=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    if mask is not None:
        m = _mask_array(mask, a, axis)
        x = np.where(m, x, -np.inf)
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _make(out, (a,), backward, "max")


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked positions get exactly zero probability."""
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    if mask is not None:
        x = x + _mask_bias(mask, a, axis)
    e = np.exp(x - fast_max(x, axis))
    out = e / fast_sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - fast_sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def logsumexp(a: Tensor, axis: int, mask=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    if mask is not None:
        x = x + _mask_bias(mask, a, axis)
    top = fast_max(x, axis)
    e = np.exp(x - top)
    total = fast_sum(e, axis=axis, keepdims=True)
    out = np.log(total) + top
    weights = e / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _make(out, (a,), backward, "logsumexp")


# --------------------------------------------------------------------------
# fused layers


def attention_weights(q: Tensor, k: Tensor, scale_by: float, mask=None) -> Tensor:
    """softmax(q k^T * scale_by) over the last axis, masked keys set to zero.

    One node for the matmul, scaling and softmax; ``mask`` broadcasts against
    the (..., n_q, n_k) score array.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} widths differ")
    scale_by = float(scale_by)
    kt = np.swapaxes(k.data, -1, -2)
    scores = q.data @ kt
    np.multiply(scores, np.asarray(scale_by, dtype=scores.dtype), out=scores)
    axis = scores.ndim - 1
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.all():
            np.add(scores, _mask_bias(m, Tensor(scores), axis), out=scores)
        elif not m.any(axis=-1).all():
            raise DegenerateInputError("every element of a reduced slice is masked")
    np.subtract(scores, fast_max(scores, axis), out=scores)
    np.exp(scores, out=scores)
    np.divide(scores, fast_sum(scores, axis=axis, keepdims=True), out=scores)
    out = scores

    def backward(g):
        ds = g * out
        ds -= out * fast_sum(ds, axis=axis, keepdims=True)
        ds *= np.asarray(scale_by, dtype=ds.dtype)
        gq = unbroadcast(ds @ k.data, q.shape) if q.requires_grad else None
        gk = unbroadcast(np.swapaxes(ds, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        return gq, gk

    return _make(out, (q, k), backward, "attention_weights")


def _scatter_rows(g: np.ndarray, index: np.ndarray | None, n: int) -> np.ndarray:
    """Sum rows of ``g`` into ``n`` slots by ``index`` (inverse of a gather)."""
    if index is None:
        return g
    onehot = np.zeros((n, len(index)), dtype=g.dtype)
    onehot[index, np.arange(len(index))] = 1
    return (onehot @ g.reshape(len(index), -1)).reshape((n,) + g.shape[1:])


def multi_head_core(xq: Tensor, xkv: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                    wv: Tensor, bv: Tensor, heads: int, key_mask=None,
                    q_index=None, kv_index=None) -> tuple[Tensor, np.ndarray]:
    """Project, split heads, attend and merge heads, as one graph node.

    ``xq`` (Bq, n_q, d_in) and ``xkv`` (Bk, n_k, d_in) are projected to width
    D = ``wq.shape[1]`` and split into ``heads`` heads of D / heads. Optional
    ``q_index`` / ``kv_index`` gather rows after projection, pairing query
    item ``q_index[p]`` with key item ``kv_index[p]``. ``key_mask`` is
    (Bk, n_k), indexed like ``xkv``. Returns the merged head outputs
    (P, n_q, D) and the attention weights (P, heads, n_q, n_k).
    """
    bqn, n_q, d_in = xq.shape
    bkn, n_k, _ = xkv.shape
    width = wq.shape[1]
    if width % heads:
        raise ShapeError(f"projection width {width} is not divisible by {heads} heads")
    if wq.shape[0] != d_in or wk.shape != wq.shape or wv.shape != wq.shape or xkv.shape[2] != d_in:
        raise ShapeError(f"attention projections {wq.shape} do not fit inputs {xq.shape}, {xkv.shape}")
    dh = width // heads
    scale_by = 1.0 / np.sqrt(dh)
    q_index = None if q_index is None else np.asarray(q_index, dtype=np.intp)
    kv_index = None if kv_index is None else np.asarray(kv_index, dtype=np.intp)

    def project(x2, w, b, n, rows):
        out = x2 @ w.data
        np.add(out, b.data, out=out)
        return out.reshape(rows, n, heads, dh).transpose(0, 2, 1, 3)  # (rows, h, n, dh)

    xq2 = xq.data.reshape(-1, d_in)
    xk2 = xkv.data.reshape(-1, d_in)
    q = project(xq2, wq, bq, n_q, bqn)
    k = project(xk2, wk, bk, n_k, bkn)
    v = project(xk2, wv, bv, n_k, bkn)
    if q_index is not None:
        q = q[q_index]
    if kv_index is not None:
        k, v = k[kv_index], v[kv_index]
    if len(q) != len(k):
        raise ShapeError(f"paired batch sizes differ: {len(q)} vs {len(k)}")
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.shape != (bkn, n_k):
            raise ShapeError(f"key mask {mask.shape} does not match keys {(bkn, n_k)}")
        if kv_index is not None:
            mask = mask[kv_index]
    scores = q @ np.swapaxes(k, -1, -2)
    np.multiply(scores, np.asarray(scale_by, dtype=scores.dtype), out=scores)
    if mask is not None and not mask.all():
        if not mask.any(axis=-1).all():
            raise DegenerateInputError("every key of an attention row is masked")
        bias = np.where(mask, 0.0, -np.inf).astype(scores.dtype)[:, None, None, :]
        np.add(scores, bias, out=scores)
    np.subtract(scores, fast_max(scores, scores.ndim - 1), out=scores)
    np.exp(scores, out=scores)
    np.divide(scores, fast_sum(scores, axis=-1, keepdims=True), out=scores)
    att = scores
    heads_out = att @ v  # (P, h, n_q, dh)
    n_pairs = len(att)
    out = heads_out.transpose(0, 2, 1, 3).reshape(n_pairs, n_q, width)

    def backward(g):
        g4 = g.reshape(n_pairs, n_q, heads, dh).transpose(0, 2, 1, 3)
        g_att = g4 @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(att, -1, -2) @ g4
        g_s = g_att * att
        g_s -= att * fast_sum(g_s, axis=-1, keepdims=True)
        g_s *= np.asarray(scale_by, dtype=g_s.dtype)
        gq = g_s @ k
        gk = np.swapaxes(g_s, -1, -2) @ q
        gq = _scatter_rows(gq, q_index, bqn)
        gk = _scatter_rows(gk, kv_index, bkn)
        gv = _scatter_rows(gv, kv_index, bkn)

        def merged(gh):
            return gh.transpose(0, 2, 1, 3).reshape(-1, width)

        gq2, gk2, gv2 = merged(gq), merged(gk), merged(gv)
        gxq = (gq2 @ wq.data.T).reshape(xq.shape) if xq.requires_grad else None
        gxkv = None
        if xkv.requires_grad:
            gxkv = (gk2 @ wk.data.T + gv2 @ wv.data.T).reshape(xkv.shape)
        return (gxq, gxkv,
                xq2.T @ gq2, fast_sum(gq2, axis=0),
                xk2.T @ gk2, fast_sum(gk2, axis=0),
                xk2.T @ gv2, fast_sum(gv2, axis=0))

    node = _make(out, (xq, xkv, wq, bq, wk, bk, wv, bv), backward, "multi_head_core")
    return node, att


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mean_vec = np.full(d, 1.0 / d, dtype=x.dtype)
    centred = x.data - (x.data @ mean_vec)[..., None]
    inv = 1.0 / np.sqrt(((centred * centred) @ mean_vec)[..., None] + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - (gh @ mean_vec)[..., None]
                        - xhat * ((gh * xhat) @ mean_vec)[..., None])
        lead = tuple(range(g.ndim - 1))
        return gx, fast_sum(g * xhat, axis=lead), fast_sum(g, axis=lead)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, keep: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/keep during training, identity otherwise."""
    if not training or keep >= 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape, dtype=np.float32) < keep) * np.asarray(1.0 / keep, dtype=x.dtype)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy in the stable logit form."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("binary cross-entropy targets must lie in [0, 1]")
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce_with_logits")


# --------------------------------------------------------------------------
# serialization


def write_array(stream: BinaryIO, array: np.ndarray) -> None:
    """Shape header (u32 rank, u32 dims) followed by little-endian floats."""
    array = np.asarray(array)
    stream.write(struct.pack("<I", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_array(stream: BinaryIO, dtype) -> np.ndarray:
    dtype = np.dtype(dtype).newbyteorder("<")
    head = stream.read(4)
    if len(head) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    dims_raw = stream.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ValueError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(shape, dtype=np.int64))
    raw = stream.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated tensor data")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)
