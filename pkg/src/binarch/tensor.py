"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation appends one record to the active tape of the
calling thread. ``backward`` replays that tape in reverse and accumulates
gradients into the ``grad`` buffer of every leaf with ``requires_grad``.
A tape can be replayed once; afterwards recording continues on a fresh tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used when tensors are built from Python data."""
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class TapeError(RuntimeError):
    """Raised on misuse of the autodiff tape (double replay, stale tensors)."""


class Tape:
    """Ordered list of recorded operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[int, tuple["Tensor", ...], Callable]] = []
        self.consumed = False
        self._next_node = 0

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records = []
        self.consumed = False
        self._next_node = 0

    def _record(self, parents: tuple["Tensor", ...], backward: Callable) -> int:
        node = self._next_node
        self._next_node += 1
        self.records.append((node, parents, backward))
        return node

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() or record a new forward pass")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {loss._node: np.asarray(grad, dtype=loss.data.dtype)}
        # a record's output node equals its position in the list
        for node, parents, fn in reversed(self.records):
            g = grads.pop(node, None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    p._accumulate(pg)
                elif p._tape is self:
                    if p._node in grads:
                        grads[p._node] = grads[p._node] + pg
                    else:
                        grads[p._node] = pg
        self.consumed = True
        if getattr(_state, "tape", None) is self:
            _state.tape = Tape()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional real array that can take part in an autodiff tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node: int = -1

    # construction from an op -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._tape = None
        out._node = -1
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            tape = current_tape()
            for p in parents:
                if p.requires_grad and p._tape is not None and p._tape is not tape:
                    raise TapeError("input tensor belongs to a replayed tape")
            out._tape = tape
            out._node = tape._record(tuple(parents), backward)
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # basic properties --------------------------------------------------------

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic --------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Replay the tape that produced ``loss`` and accumulate leaf gradients."""
    if loss._tape is None:
        if not loss.requires_grad:
            raise TapeError("loss does not require grad")
        loss._accumulate(np.ones_like(loss.data) if grad is None else np.asarray(grad))
        return
    loss._tape.backward(loss, grad)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise and structural ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad / bd, (a, b), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._from_op(x.data.reshape(shape), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g) if _is_fancy(index) else out.__setitem__(index, g)
        return (out,)

    return Tensor._from_op(np.asarray(x.data[index]), (x,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return Tensor._from_op(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Return ``sum_k weights[k] * tensors[k]`` with a 1-D weight tensor."""
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ValueError(f"need one weight per tensor, got {weights.shape} for {len(tensors)}")
    ref = tensors[0].shape
    for t in tensors:
        if t.shape != ref:
            raise ValueError(f"weighted_sum shape mismatch: {ref} vs {t.shape}")
    w = weights.data
    out = tensors[0].data * w[0]
    for k in range(1, len(tensors)):
        out = out + tensors[k].data * w[k]

    def bw(g):
        gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=w.dtype)
        return tuple(g * w[k] if tensors[k].requires_grad else None for k in range(len(tensors))) + (gw,)

    return Tensor._from_op(out, tuple(tensors) + (weights,), bw)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)
