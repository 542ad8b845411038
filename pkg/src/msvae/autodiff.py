"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

Graphs are built define-by-run: each operation records its parent tensors
and a closure that routes the output gradient back to them.  Calling
`backward` on a scalar seeds the chain and walks the recorded graph once in
reverse topological order.  Subgraphs that cannot influence any gradient
(no parent requires one) are pruned at construction, so forward passes over
frozen parameters run at plain numpy cost.

Gradients of broadcast operations are summed back down to the operand
shape.  Non-differentiable points use the conventional subgradients:
zero for |.| at 0 and for relu at 0.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .kernels import state_l1_residuals, state_l1_residuals_grad

Array = np.ndarray

__all__ = [
    "Tensor",
    "as_tensor",
    "absolute",
    "affine",
    "exp",
    "log",
    "logsumexp",
    "relu",
    "sqrt",
    "stack",
    "state_l1",
]


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` over broadcast axes so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_ran")

    # Keep numpy from broadcasting elementwise over Tensor objects; with
    # this unset, `ndarray op Tensor` never reaches the reflected overloads.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None
        self._ran = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values outside the recorded graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if self._ran:
            raise RuntimeError("backward was already run from this root; rebuild the graph first")
        self._ran = True
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(self, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack_.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Arithmetic sugar; every overload funnels into the module-level ops.

    def __add__(self, other):
        return _add(self, as_tensor(other))

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _sub(self, as_tensor(other))

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, exponent):
        return _pow(self, exponent)

    def __matmul__(self, other):
        return _matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, np.sum, axis, keepdims, scale=1.0)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in _axis_tuple(axis, self.ndim)])
        return _reduce(self, np.mean, axis, keepdims, scale=1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _axis_tuple(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _node(data: Array, parents: Sequence[Tensor], make_backward) -> Tensor:
    """Create a graph node, or a detached constant when no parent needs grads."""
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = live
    out._backward = make_backward(out)
    return out


def _accum(t: Tensor, g: Array, owned: bool = False) -> None:
    """Add a gradient contribution into t.grad.

    With owned=True the caller guarantees g is a freshly built array that
    nothing else references, so the first contribution can be adopted
    in place of copying.  Views or possibly aliased arrays must pass
    owned=False.
    """
    if t.grad is None:
        g = np.asarray(g)
        if g.shape == t.data.shape:
            t.grad = g if owned else g.copy()
            return
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _add(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def run():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.shape))

        return run

    return _node(a.data + b.data, (a, b), make)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def run():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-out.grad, b.shape), owned=True)

        return run

    return _node(a.data - b.data, (a, b), make)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def run():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.shape), owned=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.shape), owned=True)

        return run

    return _node(a.data * b.data, (a, b), make)


def _div(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def run():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad / b.data, a.shape), owned=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape), owned=True)

        return run

    return _node(a.data / b.data, (a, b), make)


def _neg(a: Tensor) -> Tensor:
    def make(out):
        def run():
            _accum(a, -out.grad, owned=True)

        return run

    return _node(-a.data, (a,), make)


def _pow(a: Tensor, exponent) -> Tensor:
    p = float(exponent)

    def make(out):
        def run():
            _accum(a, out.grad * p * np.power(a.data, p - 1.0), owned=True)

        return run

    return _node(np.power(a.data, p), (a,), make)


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul supports 2-d operands, got {a.shape} @ {b.shape}")

    def make(out):
        def run():
            if a.requires_grad:
                _accum(a, out.grad @ b.data.T, owned=True)
            if b.requires_grad:
                _accum(b, a.data.T @ out.grad, owned=True)

        return run

    return _node(a.data @ b.data, (a, b), make)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b as a single fused node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"affine expects 2-d input and weight, got {x.shape}, {w.shape}")

    def make(out):
        def run():
            g = out.grad
            if x.requires_grad:
                _accum(x, g @ w.data.T, owned=True)
            if w.requires_grad:
                _accum(w, x.data.T @ g, owned=True)
            if b.requires_grad:
                _accum(b, g.sum(axis=0), owned=True)

        return run

    return _node(x.data @ w.data + b.data, (x, w, b), make)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def make(out):
        def run():
            _accum(a, out.grad * out.data, owned=True)

        return run

    return _node(np.exp(a.data), (a,), make)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def make(out):
        def run():
            _accum(a, out.grad / a.data, owned=True)

        return run

    return _node(np.log(a.data), (a,), make)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def make(out):
        def run():
            _accum(a, out.grad * 0.5 / out.data, owned=True)

        return run

    return _node(np.sqrt(a.data), (a,), make)


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def make(out):
        def run():
            _accum(a, out.grad * np.sign(a.data), owned=True)

        return run

    return _node(np.abs(a.data), (a,), make)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def make(out):
        def run():
            _accum(a, out.grad * (a.data > 0.0), owned=True)

        return run

    return _node(np.maximum(a.data, 0.0), (a,), make)


def _reduce(a: Tensor, fn, axis, keepdims: bool, scale: float) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    value = fn(a.data, axis=axes if axis is not None else None, keepdims=keepdims)

    def make(out):
        def run():
            g = out.grad
            if not keepdims:
                expand = list(g.shape)
                for ax in sorted(axes):
                    expand.insert(ax, 1)
                g = g.reshape(expand)
            if scale != 1.0:
                g = g * scale
            _accum(a, np.broadcast_to(g, a.shape))

        return run

    return _node(np.asarray(value), (a,), make)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    def make(out):
        def run():
            _accum(a, out.grad.reshape(a.shape))

        return run

    return _node(a.data.reshape(shape), (a,), make)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along one axis, stabilized by a detached max pivot."""
    a = as_tensor(a)
    ax = axis % a.ndim
    pivot = np.max(a.data, axis=ax, keepdims=True)
    shifted = np.exp(a.data - pivot)
    total = shifted.sum(axis=ax, keepdims=True)
    value = np.log(total) + pivot
    if not keepdims:
        value = np.squeeze(value, axis=ax)

    def make(out):
        def run():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis=ax)
            _accum(a, g * (shifted / total), owned=True)

        return run

    return _node(value, (a,), make)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors of equal shape along a new axis."""
    parts = [as_tensor(t) for t in tensors]
    data = np.stack([p.data for p in parts], axis=axis)

    def make(out):
        def run():
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _accum(p, np.take(out.grad, i, axis=axis), owned=True)

        return run

    return _node(data, tuple(parts), make)


def state_l1(x: Array, mu: Tensor, states: Array) -> Tensor:
    """Per-state L1 reconstruction residuals via the kernel backend.

    x (B, D) and states (S, K) are constants; mu (B, M, K, D) carries the
    gradient.  The backward pass recomputes the residual signs instead of
    storing the (B, M, S, D) intermediate.
    """
    mu = as_tensor(mu)
    x = np.ascontiguousarray(x, dtype=np.float64)
    states = np.ascontiguousarray(states, dtype=np.uint8)
    value = state_l1_residuals(x, mu.data, states)

    def make(out):
        def run():
            _accum(mu, state_l1_residuals_grad(x, mu.data, states, out.grad), owned=True)

        return run

    return _node(value, (mu,), make)
