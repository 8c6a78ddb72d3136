"""Dense tensors with tape-based reverse-mode differentiation.

Operations on tensors that require gradients are recorded on the active
:class:`Tape`, in execution order. :func:`backward` replays the recorded
adjoints in reverse, so each node is visited exactly once and operands are
always processed after their consumers.

Broadcasting is limited to leading axes: ``[..., d]`` against ``[d]`` or
``[B, T, d]`` against ``[T, d]``, and leading batch axes in :func:`matmul`.

Typical use::

    with Tape() as tape:
        loss = (x * x).sum()
        backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError, DegenerateBatchError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed once. Call :meth:`reset` (or create a new tape)
    before recording the next step.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.replayed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward_fn: Callable) -> None:
        if self.replayed:
            raise UsageError("tape was already replayed; call reset() before recording a new step")
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.replayed = False


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tensor:
    """An n-dimensional array of reals that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    # -- metadata -------------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a1: int, a2: int):
        return swapaxes(self, a1, a2)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_leading_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    short, long_ = (a, b) if a.ndim <= b.ndim else (b, a)
    if short.shape != long_.shape[long_.ndim - short.ndim:]:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = x.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def elementwise_mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading_broadcast(a, b, "elementwise_mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; mask broadcasts onto ``x``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(full, x.dtype.type(value), x.data)
    return _result(out, (x,), lambda g: (np.where(full, 0, g).astype(g.dtype),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- reductions and shape ----------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat_lastaxis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_lastaxis: leading extents differ, {a.shape} vs {b.shape}")
    na = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _result(out, (a, b), lambda g: (g[..., :na], g[..., na:]))


def split_lastaxis(x: Tensor, first: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_lastaxis`: split after ``first`` columns."""
    if not 0 <= first <= x.shape[-1]:
        raise DimensionError(f"split_lastaxis: cannot split extent {x.shape[-1]} at {first}")
    rest = x.shape[-1] - first

    def back_left(g):
        return (np.concatenate([g, np.zeros(x.shape[:-1] + (rest,), g.dtype)], axis=-1),)

    def back_right(g):
        return (np.concatenate([np.zeros(x.shape[:-1] + (first,), g.dtype), g], axis=-1),)

    return (_result(x.data[..., :first], (x,), back_left),
            _result(x.data[..., first:], (x,), back_right))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[d_in, d_out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation ---------------------------------------------------------------

def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax_lastaxis: last extent must be at least 1")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastaxis: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent {d}")
    if eps <= 0:
        raise UsageError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def back(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), back)


# -- lookup and losses -----------------------------------------------------------

def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("embedding_lookup: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[idx], (table,), back)


def cross_entropy_with_logits(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Positions equal to ``ignore_index`` are excluded from both the sum and the
    count. Raises :class:`DegenerateBatchError` if every position is ignored.
    """
    tgt = np.asarray(targets)
    if logits.shape[:-1] != tgt.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} do not match targets {tgt.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy: non-finite logits")
    keep = np.ones(tgt.shape, bool) if ignore_index is None else tgt != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise DegenerateBatchError("cross_entropy: every target position is ignored")
    safe = np.where(keep, tgt, 0)
    V = logits.shape[-1]
    if safe.min() < 0 or safe.max() >= V:
        raise DimensionError(f"cross_entropy: target id outside [0, {V})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / n

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1, -1)
        return (p * (keep[..., None] * (g / n)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# -- reverse pass ------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Assign ``d loss / d leaf`` to ``.grad`` of every grad-enabled leaf.

    The tape that recorded ``loss`` can only be replayed once.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any grad-enabled tensor recorded on a tape")
        loss.grad = seed
        return
    if tape.replayed:
        raise UsageError("tape already replayed; reset it before calling backward again")
    tape.replayed = True

    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                key = id(p)
                if key in leaves:
                    leaves[key] = (p, leaves[key][1] + pg)
                else:
                    leaves[key] = (p, pg)
            else:
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
    for p, g in leaves.values():
        p.grad = np.ascontiguousarray(g, dtype=p.dtype)
