"""Dense float64 arrays with reverse-mode automatic differentiation.

A small tape-free engine: op functions build the computation graph eagerly
(each output node keeps references to its parents and a closure that routes
the output gradient to them) and ``backward`` on a scalar node walks the
graph in reverse topological order. The op set is what a multilayer
perceptron plus Gaussian-fusion arithmetic needs: matrix multiply,
elementwise arithmetic, exp/log/sqrt/square/reciprocal, rectified linear,
sigmoid, softmax over a chosen axis, sum/mean reductions, concatenation,
stacking, reshape and axis moves.

Everything is float64 and CPU-only; forward evaluation is deterministic.
Gradients accumulate additively over fan-out. Broadcasting follows numpy
rules for elementwise ops (the intended surface is matrix/vector plus
row-wise bias); matrix multiply is strictly 2-d.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError, NumericError, ShapeMismatchError

Array = np.ndarray


class Tensor:
    """One node of a computation graph: a float64 array plus gradient plumbing.

    Leaves are constructed directly (``requires_grad=True`` for trainable
    values); interior nodes come from the op functions in this module.
    ``grad`` reads as exact zeros for leaves that no backward pass reached.
    """

    __slots__ = ("value", "requires_grad", "_grad", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False):
        self.value: Array = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], None] | None = None

    @property
    def grad(self) -> Array:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.item())

    def _accumulate(self, grad: Array) -> None:
        if self._grad is None:
            # Copy: closures may hand the same array to several parents.
            self._grad = np.array(grad, dtype=np.float64)
        else:
            self._grad += grad

    def backward(self) -> None:
        backward(self)

    # Arithmetic operators delegate to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.value.shape}{flag})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(value: Array, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar output node."""
    if output.value.size != 1:
        raise ContractError(
            f"backward requires a scalar output, got shape {output.value.shape}"
        )
    order = _topo_order(output)
    for node in order:
        node._grad = None
    output._accumulate(np.ones_like(output.value))
    for node in reversed(order):
        if node._backward_fn is not None and node._grad is not None:
            node._backward_fn(node._grad)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, gradients un-broadcast by sum)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squashed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squashed:
        grad = grad.sum(axis=squashed, keepdims=True)
    return grad


def _binary(op_name: str, a, b, forward, grad_a, grad_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op_name, a.shape, b.shape) from None
    value = forward(a.value, b.value)

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad_a(g, a.value, b.value), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad_b(g, a.value, b.value), b.shape))

    return _make(value, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def subtract(a, b) -> Tensor:
    return _binary(
        "subtract", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g
    )


def multiply(a, b) -> Tensor:
    return _binary(
        "multiply", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def divide(a, b) -> Tensor:
    return _binary(
        "divide",
        a,
        b,
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    value = a.value @ b.value

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make(value, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(a, forward_value: Array, grad_fn) -> Tensor:
    def backward_fn(g: Array) -> None:
        a._accumulate(grad_fn(g))

    return _make(forward_value, (a,), backward_fn)


def negative(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, -a.value, lambda g: -g)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _unary(a, out, lambda g: g * out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.value), lambda g: g / a.value)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _unary(a, out, lambda g: g * 0.5 / out)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.square(a.value), lambda g: g * 2.0 * a.value)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.value
    return _unary(a, out, lambda g: -g * out * out)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.value, 0.0), lambda g: g * (a.value > 0.0))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a scalar; gradient passes only where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    return _unary(a, np.maximum(a.value, floor), lambda g: g * (a.value > floor))


def softmax(a, axis: int) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    a = as_tensor(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g: Array) -> Array:
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - inner)

    return _unary(a, out, grad_fn)


def binary_cross_entropy_with_logits(logits, targets) -> Tensor:
    """Elementwise cross-entropy of sigmoid(logits) against targets in [0, 1].

    Uses the overflow-safe form max(x, 0) - x*t + log(1 + exp(-|x|)); the
    gradient with respect to the logits is sigmoid(x) - t.
    """
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeMismatchError("binary_cross_entropy", logits.shape, targets.shape)
    x, t = logits.value, targets.value
    value = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g: Array) -> None:
        if logits.requires_grad:
            logits._accumulate(g * (1.0 / (1.0 + np.exp(-x)) - t))
        if targets.requires_grad:
            targets._accumulate(g * (-x))

    return _make(value, (logits, targets), backward_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axis(axis: int, ndim: int) -> int:
    return axis % ndim


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def grad_fn(g: Array) -> Array:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return _unary(a, value, grad_fn)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.shape[_normalize_axis(axis, a.ndim)]

    def grad_fn(g: Array) -> Array:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, a.shape)

    return _unary(a, value, grad_fn)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    return _unary(a, a.value.reshape(shape), lambda g: g.reshape(a.shape))


def moveaxis(a, source: int, destination: int) -> Tensor:
    a = as_tensor(a)
    value = np.moveaxis(a.value, source, destination)
    return _unary(a, value, lambda g: np.moveaxis(g, destination, source))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat requires at least one tensor")
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[p.shape for p in parts]) from None
    ax = _normalize_axis(axis, parts[0].ndim)
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward_fn(g: Array) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                part._accumulate(g[tuple(sl)])

    return _make(value, parts, backward_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("stack requires at least one tensor")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeMismatchError("stack", *[p.shape for p in parts])
    value = np.stack([p.value for p in parts], axis=axis)
    ax = _normalize_axis(axis, value.ndim)

    def backward_fn(g: Array) -> None:
        for i, part in enumerate(parts):
            if part.requires_grad:
                part._accumulate(np.take(g, i, axis=ax))

    return _make(value, parts, backward_fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f, point, step: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps one leaf Tensor to a scalar Tensor. Returns the maximum over
    coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if not step > 0:
        raise ContractError(f"step must be > 0, got {step}")
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = f(leaf)
    if out.value.size != 1:
        raise ContractError("finite_difference_check requires a scalar-valued function")
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function value is not finite at the evaluation point")
    backward(out)
    analytic = leaf.grad.ravel()

    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(point.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(point.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("function value is not finite at a perturbed point")
        central = (f_plus - f_minus) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(central), 1e-8)
        worst = max(worst, abs(analytic[i] - central) / denom)
    return worst
