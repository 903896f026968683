"""Dense tensors with tape-based reverse-mode differentiation and SGD updates.

A :class:`Tape` is opened for one forward/backward pass::

    with Tape() as tape:
        loss = mean(mul(x, x))
    backward(loss, tape)

Operations only record themselves while a tape is active and at least one
input requires a gradient, so code run outside a tape behaves like an
inference-only (no-grad) pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "SgdState",
    "NonFiniteError",
    "backward",
    "sgd_step",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "set_debug",
    "debug_mode",
    "check_finite",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sum_",
    "mean",
    "concat",
    "reshape",
    "record",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_DEBUG = False
_ACTIVE_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised by the debug validation pass when a NaN or Inf appears."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug(flag: bool) -> None:
    """Enable the fail-fast finite-value check on every recorded result."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_mode() -> bool:
    return _DEBUG


def check_finite(array: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        # float arrays keep their precision; Python numbers and int arrays take the default
        keep = isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating)
        arr = np.asarray(data, dtype=dtype if dtype is not None or keep else _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> None:
        """Check the structural invariants (grad shape, finiteness)."""
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")
        check_finite(self.data, self.name or "tensor")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar for the elementwise primitives.
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
        return neg(self)


TensorLike = Union[Tensor, float, int, np.ndarray]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE))


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    needs: tuple  # requires_grad of each input when the op ran


class Tape:
    """Ordered log of primitive operations for one backward pass.

    Records are appended in execution order, so every operation's inputs are
    either leaves or outputs of earlier records.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def append(self, out: Tensor, inputs: tuple, fn) -> None:
        self.records.append(_Record(out, inputs, fn, tuple(t.requires_grad for t in inputs)))
        self._produced.add(id(out))

    def clear(self) -> None:
        self.records.clear()
        self._produced.clear()


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and log ``fn`` as its backward rule.

    ``fn`` receives the upstream gradient and returns one gradient (or None)
    per input. Nothing is logged without an active tape or when no input
    requires a gradient.
    """
    if _DEBUG:
        check_finite(out_data, "operation output")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.append(out, tuple(inputs), fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate, matching the usual zero-grad-then-step
    discipline. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi, need in zip(rec.inputs, in_grads, rec.needs):
            if gi is None or not need:
                continue
            if gi.shape != t.data.shape:
                raise RuntimeError(f"backward rule produced shape {gi.shape} for input {t.shape}")
            key = id(t)
            if tape.produced(t):
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
                if _DEBUG:
                    check_finite(t.grad, f"gradient of {t.name or 'leaf'}")
    tape.clear()


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives.
#
# Broadcasting rule: operands must have identical shapes, or one of them must
# hold a single element (scalar broadcast).
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), a.shape).copy(),)

    return record(np.asarray(out, dtype=a.dtype), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(np.take(g, range(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), fn)


def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    """Per-parameter optimizer state.

    With ``momentum`` > 0 the update is ``v <- momentum * v + grad`` followed
    by ``param <- param - lr * v``; with ``momentum`` == 0 it is the plain
    ``param <- param - lr * grad``.
    """

    momentum: float = 0.0
    velocity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(param: Tensor, grad: np.ndarray, lr: float, state: Optional[SgdState] = None) -> Tensor:
    """Apply one SGD update to ``param`` (its data array is replaced, not mutated)."""
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    dt = param.data.dtype.type
    if state is None or state.momentum == 0.0:
        param.data = param.data - dt(lr) * grad.astype(param.dtype, copy=False)
        return param
    if state.velocity is None:
        state.velocity = np.zeros_like(param.data)
    state.velocity = dt(state.momentum) * state.velocity + grad.astype(param.dtype, copy=False)
    param.data = param.data - dt(lr) * state.velocity
    return param
