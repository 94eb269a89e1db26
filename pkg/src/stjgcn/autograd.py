"""Dense tensors with reverse-mode automatic differentiation.

Every op produces a new :class:`Tensor` that remembers its parents and a
local backward rule.  Tensors receive a monotonically increasing sequence
number at creation, so creation order is already a valid topological order
of the recorded graph: :func:`backward` simply replays the reachable nodes
in reverse sequence order.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np
from threadpoolctl import threadpool_limits

_seq = itertools.count()
_state = {"dtype": np.dtype(np.float64), "grad": True}

DTYPES = {"f64": np.dtype(np.float64), "f32": np.dtype(np.float32)}


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        dtype = DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in DTYPES.values():
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def strict():
    """Sequential mode: BLAS and OpenMP pools pinned to one thread so that
    reduction order, and therefore every bit of the result, is reproducible."""
    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-d array node in the differentiation record."""

    __array_ufunc__ = None  # ndarray <op> Tensor defers to Tensor's reflected op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False
        self._seq = next(_seq)

    # -- construction helpers -------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out._consumed = False
        out._seq = next(_seq)
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise --------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._from_op(a.data**p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return Tensor._from_op(a.data * active, (a,), lambda g: (g * active,), "relu")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# -- reductions and shape ops ------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out.copy(), (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; output shape splices ``indices.shape`` in."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        gm = gm.reshape((indices.size,) + gm.shape[indices.ndim:])
        summed = _segment_sum(indices.ravel(), gm, a.shape[axis])
        return (np.moveaxis(summed, 0, axis),)

    return Tensor._from_op(out, (a,), backward, "take")


def _segment_sum(index: np.ndarray, values: np.ndarray, length: int) -> np.ndarray:
    """Rows of ``values`` summed into ``length`` buckets by ``index`` (sorted-order reduce)."""
    out = np.zeros((length,) + values.shape[1:], dtype=values.dtype)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward, "stack")


# -- linear algebra -----------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def backward(g):
        ga = _operand_grad(g, b.data, a.shape, left=True) if a.requires_grad else None
        gb = _operand_grad(g, a.data, b.shape, left=False) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def _operand_grad(g: np.ndarray, other: np.ndarray, shape: tuple[int, ...], left: bool) -> np.ndarray:
    """Gradient of one matmul operand, summing broadcast batch axes inside the product."""
    batch = g.shape[:-2]
    own = (1,) * (len(batch) - (len(shape) - 2)) + tuple(shape[:-2])
    summed = [i for i in range(len(batch)) if own[i] == 1 and batch[i] > 1]
    if left:
        # dA = G @ B^T; fold summed axes into the contracted (column) dim
        other = np.broadcast_to(other, batch + other.shape[-2:])
        if summed:
            kept = [i for i in range(len(batch)) if i not in summed]
            n = len(batch)
            gt = g.transpose(kept + [n] + summed + [n + 1])
            ot = other.transpose(kept + [n] + summed + [n + 1])
            rows, cols = g.shape[-2], other.shape[-2]
            kb = tuple(batch[i] for i in kept)
            gt = gt.reshape(kb + (rows, -1))
            ot = ot.reshape(kb + (cols, -1))
            res = gt @ np.swapaxes(ot, -1, -2)
            res = res.reshape(tuple(batch[i] if i in kept else 1 for i in range(n)) + (rows, cols))
        else:
            res = g @ np.swapaxes(other, -1, -2)
    else:
        # dB = A^T @ G; fold summed axes into the contracted (row) dim
        other = np.broadcast_to(other, batch + other.shape[-2:])
        if summed:
            kept = [i for i in range(len(batch)) if i not in summed]
            n = len(batch)
            perm = kept + summed + [n, n + 1]
            kb = tuple(batch[i] for i in kept)
            at = other.transpose(perm).reshape(kb + (-1, other.shape[-1]))
            gt = g.transpose(perm).reshape(kb + (-1, g.shape[-1]))
            res = np.swapaxes(at, -1, -2) @ gt
            res = res.reshape(tuple(batch[i] if i in kept else 1 for i in range(n)) + res.shape[-2:])
        else:
            res = np.swapaxes(other, -1, -2) @ g
    return _unbroadcast(res, shape)


# -- normalizers --------------------------------------------------------
def masked_softmax(x: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries are exactly zero.

    Rows without any unmasked entry come out all-zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape}")
    shifted = np.where(mask, x.data, -np.inf)
    peak = shifted.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - peak, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "masked_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, np.ones(x.shape, dtype=bool), axis)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float,
               mean_=None, var_=None):
    """Fused normalize-scale-shift over ``axes``.

    With ``mean_``/``var_`` given the statistics are treated as constants
    (inference); otherwise batch statistics are used and returned.
    """
    axes = _norm_axes(axes, x.ndim)
    training = mean_ is None
    if training:
        mean_ = x.data.mean(axis=axes, keepdims=True)
        var_ = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var_ + eps)
    xhat = (x.data - mean_) * inv_std
    out = gamma.data * xhat + beta.data
    n = int(np.prod([x.shape[i] for i in axes]))

    def backward(g):
        dgamma = _unbroadcast((g * xhat).sum(axis=axes, keepdims=True), gamma.shape)
        dbeta = _unbroadcast(g.sum(axis=axes, keepdims=True), beta.shape)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    result = Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")
    return result, mean_, var_


# -- differentiation ----------------------------------------------------
def tape(loss: Tensor) -> list[Tensor]:
    """Recorded op entries reachable from ``loss`` in topological order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(node._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the gradients contributed by this call, keyed by leaf.  The
    record is released afterwards; calling again on the same loss raises.
    """
    if loss._consumed:
        raise TapeError("tape already consumed: run a new forward pass before backward()")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    entries = tape(loss)
    if not entries:
        raise TapeError("nothing recorded: loss does not depend on any requires_grad tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    for node in entries:
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True
    return result
