"""Dense float32 tensors with reverse-mode differentiation.

Storage is float32, row-major. Reductions, matrix products and softmax
denominators accumulate in float64 and are rounded back to float32 on output.
Broadcasting is limited to scalar-with-tensor; any other shape mismatch raises
ContractViolationError.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from fatigue_tool.exceptions import ContractViolationError

FloatArray = npt.NDArray[np.float32]
GradArray = npt.NDArray[np.float64]
Vjp = Callable[[GradArray], tuple[GradArray | None, ...]]
ElementwiseOp = Literal["add", "sub", "mul", "scale", "relu", "sigmoid"]
Scalar = float | int

_relu_mode: contextvars.ContextVar[str] = contextvars.ContextVar("relu_mode", default="standard")


@dataclass(eq=False)
class TapeNode:
    """One recorded operation.

    Values needed by the backward rule are captured by ``vjp``, which maps the
    gradient of ``output`` to one gradient (or None) per input.
    """

    op: str
    inputs: tuple[Tensor, ...]
    vjp: Vjp = field(repr=False)


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        *,
        node: TapeNode | None = None,
    ) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if any(extent < 1 for extent in arr.shape):
            raise ContractViolationError(f"tensor extents must be positive, got {arr.shape}")
        self.data: FloatArray = arr
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad
        self.node = node
        self._retain = False

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractViolationError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> Tensor:
        """Keep the gradient of this non-leaf tensor after backward."""
        self._retain = True
        return self

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor | Scalar) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Scalar) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor | Scalar) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> Tensor:
        return add(scale(self, -1.0), other)

    def __mul__(self, other: Tensor | Scalar) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other: Scalar) -> Tensor:
        return scale(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def permute(self, *axes: int) -> Tensor:
        return permute(self, axes)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return tensor_sum(self, axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return mean(self, axis)

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def softmax(self, axis: int = -1) -> Tensor:
        return softmax(self, axis)


def _record(op: str, out: npt.ArrayLike, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    node = TapeNode(op=op, inputs=inputs, vjp=vjp) if requires_grad else None
    return Tensor(out, requires_grad=requires_grad, node=node)


def _f64(t: Tensor) -> GradArray:
    return t.data.astype(np.float64)


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.size == 1


def _shape_mismatch(op: str, a: Tensor, b: Tensor) -> ContractViolationError:
    return ContractViolationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        value = float(b)
        return _record("add", _f64(a) + value, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _record("add", _f64(a) + _f64(b), (a, b), lambda g: (g, g))
    if _is_scalar_tensor(b):
        return _record(
            "add",
            _f64(a) + _f64(b).reshape(()),
            (a, b),
            lambda g: (g, np.asarray(g.sum()).reshape(b.shape)),
        )
    raise _shape_mismatch("add", a, b)


def sub(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape == b.shape:
        return _record("sub", _f64(a) - _f64(b), (a, b), lambda g: (g, -g))
    if _is_scalar_tensor(b):
        return _record(
            "sub",
            _f64(a) - _f64(b).reshape(()),
            (a, b),
            lambda g: (g, np.asarray(-g.sum()).reshape(b.shape)),
        )
    raise _shape_mismatch("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a64, b64 = _f64(a), _f64(b)
    if a.shape == b.shape:
        return _record("mul", a64 * b64, (a, b), lambda g: (g * b64, g * a64))
    if _is_scalar_tensor(b):
        return scale(a, b)
    raise _shape_mismatch("mul", a, b)


def scale(a: Tensor, s: Tensor | Scalar) -> Tensor:
    """Multiply every element by a scalar; ``s`` may be a trainable one-element tensor."""
    a64 = _f64(a)
    if not isinstance(s, Tensor):
        factor = float(s)
        return _record("scale", a64 * factor, (a,), lambda g: (g * factor,))
    if not _is_scalar_tensor(s):
        raise ContractViolationError(f"scale: factor must have one element, got {s.shape}")
    s64 = float(s.data.reshape(-1)[0])
    return _record(
        "scale",
        a64 * s64,
        (a, s),
        lambda g: (g * s64, np.asarray((g * a64).sum()).reshape(s.shape)),
    )


def relu(a: Tensor) -> Tensor:
    a64 = _f64(a)
    positive = a64 > 0

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        if _relu_mode.get() == "guided":
            return (g * (positive & (g > 0)),)
        return (g * positive,)

    return _record("relu", np.where(positive, a64, 0.0), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a64 = _f64(a)
    out = np.empty_like(a64)
    pos = a64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a64[pos]))
    ex = np.exp(a64[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(_f64(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; values below ``floor`` are clamped and receive no gradient."""
    a64 = _f64(a)
    if floor is not None:
        live = a64 >= floor
        clamped = np.where(live, a64, floor)
    else:
        if np.any(a64 <= 0):
            raise ContractViolationError("log: non-positive input without a floor")
        live = np.ones_like(a64, dtype=bool)
        clamped = a64
    return _record("log", np.log(clamped), (a,), lambda g: (g * live / clamped,))


def elementwise(op: ElementwiseOp, a: Tensor, b: Tensor | Scalar | None = None) -> Tensor:
    """Dispatch one of the named elementwise operations."""
    if op in ("relu", "sigmoid"):
        return relu(a) if op == "relu" else sigmoid(a)
    if b is None:
        raise ContractViolationError(f"{op} needs a second operand")
    match op:
        case "add":
            return add(a, b)
        case "sub":
            return sub(a, b)
        case "mul":
            return mul(a, b) if isinstance(b, Tensor) else scale(a, b)
        case "scale":
            return scale(a, b)
    raise ContractViolationError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of M x K by K x N, or batched B x M x K by B x K x N."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ContractViolationError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolationError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ContractViolationError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    a64, b64 = _f64(a), _f64(b)

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        return g @ np.swapaxes(b64, -1, -2), np.swapaxes(a64, -1, -2) @ g

    return _record("matmul", a64 @ b64, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractViolationError(f"softmax: axis {axis} invalid for shape {x.shape}")
    x64 = _f64(x)
    if np.isnan(x64).any():
        raise ContractViolationError("softmax: NaN input")
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: GradArray) -> tuple[GradArray | None, ...]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(int(s) for s in shape)
    if -1 in target:
        known = int(np.prod([s for s in target if s != -1]))
        target = tuple(x.size // known if s == -1 else s for s in target)
    if int(np.prod(target)) != x.size:
        raise ContractViolationError(f"reshape: cannot view {x.shape} as {target}")
    original = x.shape
    return _record("reshape", x.data.reshape(target), (x,), lambda g: (g.reshape(original),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(int(a) for a in axes)
    if sorted(order) != list(range(x.ndim)):
        raise ContractViolationError(f"permute: {order} is not a permutation of {x.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(order))
    return _record(
        "permute",
        np.transpose(x.data, order),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def _normalize_axes(x: Tensor, axis: int | tuple[int, ...] | None) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else axis
    return tuple(a % x.ndim for a in axes)


def tensor_sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    axes = _normalize_axes(x, axis)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = _f64(x).sum(axis=axes)
    return _record(
        "sum",
        out,
        (x,),
        lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),),
    )


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    axes = _normalize_axes(x, axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = _f64(x).sum(axis=axes) / count
    return _record(
        "mean",
        out,
        (x,),
        lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),),
    )


@contextmanager
def guided_relu() -> Iterator[None]:
    """Within this block relu backward passes only positive gradient at positive inputs."""
    token = _relu_mode.set("guided")
    try:
        yield
    finally:
        _relu_mode.reset(token)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            stack.extend(
                (inp, False)
                for inp in tensor.node.inputs
                if inp.requires_grad and id(inp) not in visited
            )
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad leaf reachable from ``loss``.

    Gradients add onto existing buffers; call zero_grad between steps.
    """
    if loss.size != 1:
        raise ContractViolationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolationError("backward: loss does not depend on any trainable tensor")

    pending: dict[int, GradArray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for tensor in reversed(_topological_order(loss)):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None or tensor._retain:
            update = g.astype(np.float32)
            tensor.grad = update if tensor.grad is None else tensor.grad + update
        if tensor.node is None:
            continue
        for inp, inp_grad in zip(tensor.node.inputs, tensor.node.vjp(g), strict=True):
            if inp_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = pending[key] + inp_grad if key in pending else inp_grad


@dataclass
class GradCheckReport:
    max_error: float
    tolerance: float
    per_tensor: list[float]

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    tolerance: float = 1e-3,
    wrt: Sequence[Tensor] | None = None,
    scale_floor: float = 1.0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The error per element is |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
    With the default floor of 1 the error is relative for gradients of magnitude 1 or more
    and absolute below that, where float32 central differences are too noisy to compare
    relatively. Lower ``scale_floor`` to check small gradients relatively.
    ``wrt`` lists the tensors to check (defaults to ``x``); each must require grad.
    """
    targets = list(wrt) if wrt is not None else [x]
    for t in targets:
        t.zero_grad()
    loss = f(x)
    backward(loss)
    analytic = [
        t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape) for t in targets
    ]

    errors: list[float] = []
    for t, grad in zip(targets, analytic, strict=True):
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = np.float32(original + step)
            upper, plus = float(flat[i]), float(f(x).item())
            flat[i] = np.float32(original - step)
            lower, minus = float(flat[i]), float(f(x).item())
            flat[i] = original
            numeric = (plus - minus) / (upper - lower)
            a = float(grad.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), scale_floor))
        errors.append(worst)
    for t in targets:
        t.zero_grad()
    return GradCheckReport(max_error=max(errors), tolerance=tolerance, per_tensor=errors)
