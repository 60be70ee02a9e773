"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to per-parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.

Sums along an axis are evaluated strictly sequentially (``np.cumsum``), so a
masked reduction over ``k`` valid entries is bit-identical to an unmasked
reduction over just those entries.  This is what makes padding invisible to
the attention layers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "MaskError",
    "ShapeError",
    "Tensor",
    "activation",
    "add",
    "broadcast_to",
    "concat",
    "dropout",
    "elementwise",
    "embedding_lookup",
    "is_grad_enabled",
    "log",
    "matmul",
    "mul",
    "no_grad",
    "reduce",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "split",
    "stack",
    "sub",
    "tanh",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """A softmax or reduction slice has no unmasked entries."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``.

        Gradients accumulate across calls, as with leaf parameters in most
        frameworks; call :meth:`zero_grad` between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, mask=None, keepdims=False):
        return reduce_sum(self, axis, mask, keepdims)

    def mean(self, axis=None, mask=None, keepdims=False):
        return reduce_mean(self, axis, mask, keepdims)

    def max(self, axis=None, mask=None, keepdims=False):
        return reduce_max(self, axis, mask, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: Backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    kept = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if kept:
        grad = grad.sum(axis=kept, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over any leading ones.

    1-D operands are promoted the way ``np.matmul`` promotes them.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


# nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(op: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown activation {op!r}") from None
    return fn(x)


def log(x, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``."""
    x = as_tensor(x)
    live = x.data > floor
    safe = np.where(live, x.data, floor)
    return _result(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


# masked reductions and softmax


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def _prepare_mask(mask, shape: tuple[int, ...], axis: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(f"mask of shape {mask.shape} does not match tensor {shape}") from None
    if np.any(~mask.any(axis=axis)):
        raise MaskError("a slice has no unmasked entries (empty sequence reached attention?)")
    return mask


def _seqsum(a: np.ndarray, axis: int) -> np.ndarray:
    return np.take(np.cumsum(a, axis=axis), -1, axis=axis)


def reduce(op: str, x, axis: int | None = None, mask=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max along ``axis``, skipping positions where ``mask`` is false."""
    x = as_tensor(x)
    if op not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {op!r}")
    if axis is None:
        flat = reshape(x, (x.size,))
        m = None if mask is None else np.broadcast_to(np.asarray(mask, bool), x.shape).reshape(-1)
        out = reduce(op, flat, 0, m)
        return reshape(out, (1,) * x.ndim) if keepdims else out
    if x.ndim == 0 or x.shape[axis] == 0:
        raise MaskError("cannot reduce over an empty axis")
    axis = _normalize_axis(axis, x.ndim)
    m = _prepare_mask(mask, x.shape, axis)

    def expand(g):
        return g if keepdims else np.expand_dims(g, axis)

    if op == "max":
        masked = x.data if m is None else np.where(m, x.data, -np.inf)
        idx = np.expand_dims(np.argmax(masked, axis=axis), axis)
        data = np.take_along_axis(masked, idx, axis=axis)

        def backward(g):
            grad = np.zeros_like(x.data)
            np.put_along_axis(grad, idx, expand(g), axis=axis)
            return (grad,)

        return _result(data if keepdims else np.squeeze(data, axis), (x,), backward)

    masked = x.data if m is None else np.where(m, x.data, 0.0)
    total = _seqsum(masked, axis)
    if op == "sum":
        scale = None
        data = total
    else:
        count = float(x.shape[axis]) if m is None else m.sum(axis=axis).astype(np.float64)
        scale = np.expand_dims(count, axis) if m is not None else count
        data = total / count

    def backward(g):
        g = expand(g)
        if scale is not None:
            g = g / scale
        grad = np.broadcast_to(g, x.shape)
        return (grad * m if m is not None else np.array(grad),)

    return _result(np.expand_dims(data, axis) if keepdims else data, (x,), backward)


def reduce_sum(x, axis=None, mask=None, keepdims=False) -> Tensor:
    return reduce("sum", x, axis, mask, keepdims)


def reduce_mean(x, axis=None, mask=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axis, mask, keepdims)


def reduce_max(x, axis=None, mask=None, keepdims=False) -> Tensor:
    return reduce("max", x, axis, mask, keepdims)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilized softmax; masked positions get exactly zero weight."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    m = _prepare_mask(mask, x.shape, axis)
    if m is None and x.shape[axis] == 0:
        raise MaskError("softmax over an empty axis")
    shifted = x.data if m is None else np.where(m, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.expand_dims(_seqsum(e, axis), axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# structural ops


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _result(np.array(data), (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(data), (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if any(t.ndim != ndim for t in tensors):
        raise ShapeError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    axis = _normalize_axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat along axis {axis}: extents differ, {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        index = (slice(None),) * axis + (slice(start, start + n),)
        out.append(getitem(x, index))
        start += n
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    axis = _normalize_axis(axis, tensors[0].ndim + 1)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, backward)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.data[ids], (table,), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time only."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))
