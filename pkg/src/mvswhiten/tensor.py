"""Dense float64 tensors with a minimal reverse-mode gradient tape.

The losses in this package need gradients for a small, fixed set of
operations (matrix products, elementwise arithmetic, absolute value,
reductions), so this module implements exactly that instead of pulling in a
deep-learning framework.  Recording is explicit: tensors created through
:meth:`Tape.leaf` are tracked, plain :class:`Tensor` values are constants.
A tape is build-then-consume; once :meth:`Tape.backward` has run, no further
operations may be recorded on it.

Conventions that the rest of the package relies on:

* everything is float64 and C-contiguous, rank >= 1 (scalars are shape (1,)),
* the subgradient of ``abs`` at 0 is 0, and ``clamp_min`` uses subgradient 0
  at the hinge, so central finite differences agree at symmetric kinks,
* every operation checks its output for NaN/Inf and raises
  :class:`~mvswhiten.errors.NumericalError` instead of propagating garbage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

Scalar = (int, float, np.integer, np.floating)


def _prepare(data) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d == 0 for d in arr.shape):
        raise DimensionError(f"zero-length dimension in shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{what} produced a non-finite value")


class Tensor:
    """A float64 array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, _tape: "Tape | None" = None):
        if requires_grad and _tape is None:
            raise ContractError(
                "gradient-tracked tensors must be created via Tape.leaf()")
        self.data = _prepare(data)
        _check_finite(self.data, "tensor creation")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape = _tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self) -> "Tensor":
        return tensor_abs(self)

    def clamp_min(self, floor: float) -> "Tensor":
        return clamp_min(self, floor)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    """Wrap ``value`` as a constant Tensor; Tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations, consumed once by :meth:`backward`."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._locked = False

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        if self._locked:
            raise ContractError("cannot add leaves to a tape after backward()")
        t = Tensor(data, requires_grad=requires_grad,
                   _tape=self if requires_grad else None)
        if requires_grad:
            self._leaves.append(t)
        return t

    def _record(self, node: _Node) -> None:
        if self._locked:
            raise ContractError("cannot record operations after backward()")
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``.grad``.

        Grads are zeroed first, so calling backward twice on the same loss
        gives the same result, not a doubled one.
        """
        if loss._tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._locked = True
        for node in self._nodes:
            node.output.grad = None
            for t in node.inputs:
                if t.requires_grad:
                    t.grad = None
        for leaf in self._leaves:
            leaf.grad = np.zeros_like(leaf.data)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.vjp(g)
            for t, piece in zip(node.inputs, grads):
                if piece is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += piece


def _tape_of(tensors: Sequence[Tensor]) -> Tape | None:
    tapes = {t._tape for t in tensors if t._tape is not None}
    if len(tapes) > 1:
        raise ContractError("operands were recorded on different tapes")
    return tapes.pop() if tapes else None


def _apply(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(out_data, name)
    tape = _tape_of(inputs)
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked, _tape=tape if tracked else None)
    if tracked:
        tape._record(_Node(tuple(inputs), out, vjp))
    return out


def primitive(inputs: Sequence[Tensor], out_data, vjp,
              name: str = "primitive") -> Tensor:
    """Record a custom differentiable operation.

    ``vjp(g)`` must return one cotangent array (or None) per input, each
    shaped like the corresponding input.  The forward value ``out_data`` is
    taken as given; this is the extension point for operations (such as
    bilinear gathers) that are awkward to express with the built-in ops.
    """
    ins = tuple(as_tensor(t) for t in inputs)
    return _apply(name, ins, _prepare(out_data), vjp)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Scalar):
        s = float(b)
        return _apply("add", (a,), a.data + s, lambda g: (g,))
    b = as_tensor(b)
    _binary_shapes(a, b, "add")
    return _apply("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Scalar):
        s = float(b)
        return _apply("sub", (a,), a.data - s, lambda g: (g,))
    b = as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _apply("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Scalar):
        return scale(a, float(b))
    b = as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _apply("scale", (a,), a.data * s, lambda g: (g * s,))


def tensor_abs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # sign(0) == 0, the subgradient convention we want
    return _apply("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    floor = float(floor)
    open_mask = (a.data > floor).astype(np.float64)
    return _apply("clamp_min", (a,), np.maximum(a.data, floor),
                  lambda g: (g * open_mask,))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = tuple(sorted(a % ndim if -ndim <= a < ndim else a for a in axis))
    for a in axes:
        if not 0 <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated axis in {axes}")
    return axes


def _reduce(a: Tensor, axis, name: str, divisor_from_count: bool) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    kept = np.sum(a.data, axis=axes, keepdims=True)
    out = kept.reshape([d for i, d in enumerate(a.shape) if i not in axes] or [1])
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if divisor_from_count:
        out = out / count
    keep_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    inv = 1.0 / count if divisor_from_count else 1.0

    def vjp(g: np.ndarray) -> tuple:
        return (np.broadcast_to(g.reshape(keep_shape) * inv, a.shape).copy(),)

    return _apply(name, (a,), out, vjp)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    return _reduce(a, axis, "sum", divisor_from_count=False)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    return _reduce(a, axis, "mean", divisor_from_count=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs two matrices, got ranks {a.data.ndim} and {b.data.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _apply("matmul", (a, b), ad @ bd,
                  lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _apply("reshape", (a,), a.data.reshape(shape),
                  lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got rank {a.data.ndim}")
    return _apply("transpose", (a,), a.data.T.copy(), lambda g: (g.T.copy(),))


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self) -> str:
        verdict = "ok" if self.passed else "FAILED"
        return f"gradcheck {verdict}: max relative error {self.max_rel_err:.3e}"


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Verify d f/d x at ``x`` against central finite differences.

    ``f`` must map one tensor to a scalar tensor and be deterministic; it is
    called once with a tracked leaf and twice per coordinate with plain
    constants.  Relative error uses max(|analytic|, |numeric|, 1e-12) as the
    denominator so zero gradients compare cleanly.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("finite_diff_check needs f to return a scalar tensor")
    tape.backward(out)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        hi = f(Tensor(up.reshape(x.shape))).item()
        lo = f(Tensor(down.reshape(x.shape))).item()
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol,
                           analytic=analytic, numeric=numeric)
