"""Reverse-mode automatic differentiation over a recorded tape.

A `Tape` owns a value buffer and an append-only list of operation
records; a `Var` is a handle (tape, slot) into it. Values are float64
numpy arrays, so one record covers a whole batch (N points, N×3×3
covariances) instead of one scalar.

Every primitive below accepts `Var`s, numpy arrays or Python numbers:

- if no operand is a `Var`, the primitive returns a plain ndarray and
  records nothing. Solver code is therefore written once and runs either
  as fast numpy or recorded on a tape, depending on its inputs.
- if operands are `Var`s of different tapes, `TapeMismatch` is raised.
- if every `Var` operand is a constant, the result is a constant (no
  record, zero adjoint).

Elementwise primitives follow numpy broadcasting; adjoints are summed back
to the operand shape.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from ..utils.consts import CONDITION_LIMIT
from ..utils.errors import DomainError, SingularMatrix, TapeMismatch

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
Operand = Union["Var", Array, float, int]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]
AdjointHook = Callable[[str, Array], Array]

# θ² below which the Rodrigues coefficients use their Taylor series
_SERIES_CUTOFF = 1e-2
_SERIES_TERMS = 7


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: Tuple[int, ...]  # operand slots, -1 for non-differentiable operands
    output: int
    backward: BackwardFn


class Var:
    """Handle into one tape slot. Valid only for the tape that created it."""

    __slots__ = ("tape", "slot")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, tape: "Tape", slot: int) -> None:
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> Array:
        return self.tape.value(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(slot={self.slot}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Var":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Var":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Var":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Var":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Var":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Var":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Var":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Var":
        return div(other, self)

    def __neg__(self) -> "Var":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Var":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Var":
        return matmul(other, self)

    def __getitem__(self, key) -> "Var":
        return getitem(self, key)


class Adjoints:
    """Result of one backward pass; `adjoints[var]` is ∂seed/∂var."""

    def __init__(self, tape: "Tape", buffer: List[Optional[Array]]) -> None:
        self._tape = tape
        self._buffer = buffer

    def __getitem__(self, var: Var) -> Array:
        if var.tape is not self._tape:
            raise TapeMismatch("Var belongs to a different tape")
        g = self._buffer[var.slot]
        if g is None:
            return np.zeros_like(var.value)
        return np.array(g, dtype=np.float64)


class Tape:
    """Append-only operation record with value and adjoint buffers."""

    def __init__(self, adjoint_hook: Optional[AdjointHook] = None) -> None:
        self._values: List[Array] = []
        self._differentiable: List[bool] = []
        self._records: List[_Record] = []
        self._last: Optional[Adjoints] = None
        # Applied to every adjoint contribution (op name, gradient); test hook
        self.adjoint_hook = adjoint_hook

    def __len__(self) -> int:
        return len(self._values)

    @property
    def num_records(self) -> int:
        return len(self._records)

    # -------------------------------------------------------------------------
    # Leaves
    # -------------------------------------------------------------------------

    def variable(self, value) -> Var:
        """Differentiable leaf."""
        return self._leaf(value, differentiable=True)

    def constant(self, value) -> Var:
        """Non-differentiable leaf; its adjoint is always zero."""
        return self._leaf(value, differentiable=False)

    def _leaf(self, value, differentiable: bool) -> Var:
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self._values.append(arr)
        self._differentiable.append(differentiable)
        return Var(self, len(self._values) - 1)

    def value(self, var: Var) -> Array:
        if var.tape is not self:
            raise TapeMismatch("Var belongs to a different tape")
        return self._values[var.slot]

    def is_differentiable(self, var: Var) -> bool:
        return self._differentiable[var.slot]

    def _push(
        self, op: str, value: Array, operands: Sequence[Operand], backward: BackwardFn
    ) -> Var:
        slots = tuple(
            x.slot if isinstance(x, Var) and self._differentiable[x.slot] else -1
            for x in operands
        )
        if all(s < 0 for s in slots):
            return self.constant(value)
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self._values.append(value)
        self._differentiable.append(True)
        out = len(self._values) - 1
        self._records.append(_Record(op=op, inputs=slots, output=out, backward=backward))
        return Var(self, out)

    # -------------------------------------------------------------------------
    # Reverse pass
    # -------------------------------------------------------------------------

    def backward(self, seed: Var) -> Adjoints:
        """Populate adjoints of every slot with respect to scalar `seed`."""
        if seed.tape is not self:
            raise TapeMismatch("seed belongs to a different tape")
        if seed.value.size != 1:
            raise DomainError(f"backward seed must be scalar, got shape {seed.shape}")

        buffer: List[Optional[Array]] = [None] * len(self._values)
        if self._differentiable[seed.slot]:
            buffer[seed.slot] = np.ones_like(seed.value)

        for rec in reversed(self._records):
            if rec.output > seed.slot:
                continue
            g = buffer[rec.output]
            if g is None:
                continue
            grads = rec.backward(g)
            for slot, gi in zip(rec.inputs, grads):
                if slot < 0 or gi is None:
                    continue
                if self.adjoint_hook is not None:
                    gi = self.adjoint_hook(rec.op, gi)
                buffer[slot] = gi if buffer[slot] is None else buffer[slot] + gi

        self._last = Adjoints(self, buffer)
        return self._last

    def adjoint(self, var: Var) -> Array:
        """Adjoint from the most recent backward pass (zeros before any)."""
        if self._last is None:
            return np.zeros_like(self.value(var))
        return self._last[var]

    def reset(self) -> None:
        self._last = None


# =============================================================================
# Plumbing
# =============================================================================


def value(x: Operand) -> Array:
    """Numeric value of a Var, array or number."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_var(x: object) -> bool:
    return isinstance(x, Var)


def _tape_of(operands: Sequence[Operand]) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for x in operands:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatch("operands belong to different tapes")
    return tape


def _emit(op: str, result: Array, operands: Sequence[Operand], backward: BackwardFn):
    tape = _tape_of(operands)
    if tape is None:
        return result
    return tape._push(op, result, operands, backward)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def _check_conditioning(x: Array, what: str) -> None:
    if x.size == 0:
        return
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        cond = np.linalg.cond(x)
    bad = ~np.isfinite(cond) | (cond > CONDITION_LIMIT)
    if np.any(bad):
        worst = float(np.nanmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise SingularMatrix(
            f"{what}: {int(np.count_nonzero(bad))} matrix(es) with condition number "
            f"above {CONDITION_LIMIT:.0e} (worst {worst:.3e})",
            context={"count": int(np.count_nonzero(bad))},
        )


# =============================================================================
# Elementwise primitives
# =============================================================================


def add(a: Operand, b: Operand):
    x, y = value(a), value(b)
    return _emit(
        "add", x + y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    )


def sub(a: Operand, b: Operand):
    x, y = value(a), value(b)
    return _emit(
        "sub", x - y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    )


def mul(a: Operand, b: Operand):
    x, y = value(a), value(b)
    return _emit(
        "mul",
        x * y,
        (a, b),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def div(a: Operand, b: Operand):
    x, y = value(a), value(b)
    out = x / y
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
    )


def neg(a: Operand):
    return _emit("neg", -value(a), (a,), lambda g: (-g,))


def exp(a: Operand):
    out = np.exp(value(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Operand):
    x = value(a)
    if np.any(x <= 0.0):
        raise DomainError(f"log of non-positive value (min {float(np.min(x)):.3e})")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Operand):
    """Square root; the adjoint at exactly 0 is taken as 0."""
    x = value(a)
    if np.any(x < 0.0):
        raise DomainError(f"sqrt of negative value (min {float(np.min(x)):.3e})")
    out = np.sqrt(x)

    def backward(g: Array):
        positive = out > 0.0
        return (np.where(positive, g / (2.0 * np.where(positive, out, 1.0)), 0.0),)

    return _emit("sqrt", out, (a,), backward)


def sigmoid(a: Operand):
    x = value(a)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Operand):
    x = value(a)
    return _emit("relu", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0.0),))


def maximum(a: Operand, floor: float):
    """max(a, floor) against a constant floor; zero adjoint where clamped."""
    x = value(a)
    return _emit("maximum", np.maximum(x, floor), (a,), lambda g: (g * (x > floor),))


# =============================================================================
# Reductions and structure
# =============================================================================


def sum(a: Operand, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    x = value(a)

    def backward(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.sum(x, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Operand, axis=None, keepdims: bool = False):
    x = value(a)
    count = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def amax(a: Operand, axis: int):
    """Max along one axis; the adjoint goes to the first maximal entry."""
    x = value(a)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    def backward(g: Array):
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _emit("amax", out, (a,), backward)


def take(a: Operand, indices) -> Union[Var, Array]:
    """Gather rows `a[indices]`; indices are constants."""
    x = value(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g: Array):
        grad = np.zeros_like(x)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit("take", x[idx], (a,), backward)


def getitem(a: Operand, key):
    """Basic (non-fancy) indexing: ints, slices, Ellipsis."""
    x = value(a)

    def backward(g: Array):
        grad = np.zeros_like(x)
        grad[key] = g
        return (grad,)

    return _emit("getitem", x[key], (a,), backward)


def reshape(a: Operand, shape: Tuple[int, ...]):
    x = value(a)
    return _emit("reshape", x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def broadcast_to(a: Operand, shape: Tuple[int, ...]):
    x = value(a)
    return _emit(
        "broadcast_to", np.broadcast_to(x, shape), (a,), lambda g: (_unbroadcast(g, x.shape),)
    )


def transpose(a: Operand):
    """Swap the last two axes."""
    return _emit("transpose", _swap(value(a)), (a,), lambda g: (_swap(g),))


def stack(items: Sequence[Operand], axis: int = -1):
    xs = [value(item) for item in items]
    out = np.stack(xs, axis=axis)
    return _emit(
        "stack",
        out,
        tuple(items),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))),
    )


def concat(items: Sequence[Operand], axis: int = 0):
    xs = [value(item) for item in items]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(
        "concat",
        np.concatenate(xs, axis=axis),
        tuple(items),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# =============================================================================
# Vector / matrix primitives
# =============================================================================


def dot(a: Operand, b: Operand):
    """Inner product over the last axis."""
    x, y = value(a), value(b)
    return _emit(
        "dot",
        np.sum(x * y, axis=-1),
        (a, b),
        lambda g: (
            _unbroadcast(g[..., None] * y, x.shape),
            _unbroadcast(g[..., None] * x, y.shape),
        ),
    )


def norm2(a: Operand):
    """Euclidean norm over the last axis; the adjoint at the zero vector is 0."""
    x = value(a)
    out = np.sqrt(np.sum(x * x, axis=-1))

    def backward(g: Array):
        positive = out > 0.0
        scale = np.where(positive, g / np.where(positive, out, 1.0), 0.0)
        return (scale[..., None] * x,)

    return _emit("norm2", out, (a,), backward)


def matmul(a: Operand, b: Operand):
    """Batched matrix product; both operands at least 2-D."""
    x, y = value(a), value(b)
    if x.ndim < 2 or y.ndim < 2:
        raise DomainError(f"matmul needs 2-D operands, got {x.shape} and {y.shape}")
    return _emit(
        "matmul",
        x @ y,
        (a, b),
        lambda g: (_unbroadcast(g @ _swap(y), x.shape), _unbroadcast(_swap(x) @ g, y.shape)),
    )


def matmul3(a: Operand, b: Operand):
    x, y = value(a), value(b)
    if x.shape[-2:] != (3, 3) or y.shape[-2:] != (3, 3):
        raise DomainError(f"matmul3 needs (...,3,3) operands, got {x.shape} and {y.shape}")
    return matmul(a, b)


def matvec3(a: Operand, v: Operand):
    """(...,3,3) · (...,3) with broadcasting over the leading axes."""
    m, x = value(a), value(v)
    if m.shape[-2:] != (3, 3) or x.shape[-1:] != (3,):
        raise DomainError(f"matvec3 shapes {m.shape} and {x.shape}")
    out = np.einsum("...ij,...j->...i", m, x)
    return _emit(
        "matvec3",
        out,
        (a, v),
        lambda g: (
            _unbroadcast(g[..., :, None] * x[..., None, :], m.shape),
            _unbroadcast(np.einsum("...ij,...i->...j", m, g), x.shape),
        ),
    )


def inverse3(a: Operand):
    """Batched 3×3 inverse; ∂A⁻¹ = −A⁻¹ (∂A) A⁻¹."""
    m = value(a)
    if m.shape[-2:] != (3, 3):
        raise DomainError(f"inverse3 needs (...,3,3), got {m.shape}")
    _check_conditioning(m, "inverse3")
    inv = np.linalg.inv(m)
    inv_t = _swap(inv)
    return _emit("inverse3", inv, (a,), lambda g: (-(inv_t @ g @ inv_t),))


def solve(a: Operand, b: Operand):
    """Solve A x = b for small dense systems, batched over leading axes."""
    m, rhs = value(a), value(b)
    _check_conditioning(m, "solve")
    x = np.linalg.solve(m, rhs[..., None])[..., 0]

    def backward(g: Array):
        gb = np.linalg.solve(_swap(m), g[..., None])[..., 0]
        return (-gb[..., :, None] * x[..., None, :], gb)

    return _emit("solve", x, (a, b), backward)


# =============================================================================
# Fused rotation coefficients
# =============================================================================


def _series(s: Array, offset: int) -> Tuple[Array, Array]:
    """Σ (−1)ⁿ sⁿ / (2n+offset)! and its s-derivative."""
    val = np.zeros_like(s)
    der = np.zeros_like(s)
    factorial = float(np.prod(np.arange(1, offset + 1)))
    power = np.ones_like(s)
    for n in range(_SERIES_TERMS):
        if n > 0:
            factorial *= (2 * n + offset - 1) * (2 * n + offset)
        sign = -1.0 if n % 2 else 1.0
        val = val + sign * power / factorial
        if n + 1 < _SERIES_TERMS:
            next_fact = factorial * (2 * n + offset + 1) * (2 * n + offset + 2)
            der = der + (-sign) * (n + 1) * power / next_fact
        power = power * s
    return val, der


def _so3_coefficients(s: Array) -> Tuple[Array, Array]:
    small = s < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    theta = np.sqrt(safe)
    sin, cos = np.sin(theta), np.cos(theta)

    a = sin / theta
    b = (1.0 - cos) / safe
    c = (theta - sin) / (safe * theta)
    da = (theta * cos - sin) / (2.0 * safe * theta)
    db = (theta * sin - 2.0 * (1.0 - cos)) / (2.0 * safe * safe)
    dc = (3.0 * sin - theta * cos - 2.0 * theta) / (2.0 * safe * safe * theta)

    sa, sda = _series(s, 1)
    sb, sdb = _series(s, 2)
    sc, sdc = _series(s, 3)

    coeffs = np.stack(
        [np.where(small, sa, a), np.where(small, sb, b), np.where(small, sc, c)], axis=-1
    )
    derivs = np.stack(
        [np.where(small, sda, da), np.where(small, sdb, db), np.where(small, sdc, dc)], axis=-1
    )
    return coeffs, derivs


def so3_coefficients(theta_sq: Operand):
    """Rodrigues coefficients (sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³) as functions of θ².

    Returns shape `theta_sq.shape + (3,)`. Parameterizing by θ² keeps the
    adjoint finite at θ = 0.
    """
    s = value(theta_sq)
    if np.any(s < 0.0):
        raise DomainError("so3_coefficients of negative squared angle")
    coeffs, derivs = _so3_coefficients(s)
    return _emit(
        "so3_coefficients", coeffs, (theta_sq,), lambda g: (np.sum(g * derivs, axis=-1),)
    )
