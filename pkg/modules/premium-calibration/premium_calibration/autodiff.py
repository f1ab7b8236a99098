"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed while a ``Tape`` is active are recorded in creation
order, which is a topological order of the computation graph. ``Tape.backward``
walks that list in reverse and visits every node exactly once, so deep graphs
(long recurrent unrolls) never hit the recursion limit.
"""

from collections.abc import Callable
from collections.abc import Sequence
from typing import Any

import numpy as np

from .errors import ShapeError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Float64 array with an optional gradient and a backward rule."""

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # Operator sugar
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tensor_mean(self, axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


class Tape:
    """Records primitive operations for one backward pass.

    Usage:
        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        for parent in node.parents:
            if parent.is_leaf and parent.requires_grad:
                self.leaves[id(parent)] = parent

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every recorded node and leaf reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for leaf in self.leaves.values():
            leaf.grad = None
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, parents=parents if requires_grad else ())
    if requires_grad and _ACTIVE_TAPES:
        out._backward = backward
        _ACTIVE_TAPES[-1].record(out)
    return out


def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _node(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def matmul(x: Any, w: Any) -> Tensor:
    """``x @ w`` for x of shape (..., n_in) and a 2-D w of shape (n_in, n_out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))

    return _node(x.data @ w.data, (x, w), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _node(np.where(active, x.data, 0.0), (x,), lambda g: _accumulate(x, g * active))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: _accumulate(x, g * (1.0 - out**2)))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: _accumulate(x, g * out * (1.0 - out)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: _accumulate(x, g * out))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def absolute(x: Tensor) -> Tensor:
    # np.sign gives the subgradient 0 at exactly 0
    return _node(np.abs(x.data), (x,), lambda g: _accumulate(x, g * np.sign(x.data)))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); the gradient is zero where the floor is active."""
    active = x.data > floor
    return _node(np.where(active, x.data, floor), (x,), lambda g: _accumulate(x, g * active))


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data**exponent
    return _node(out, (x,), lambda g: _accumulate(x, g * exponent * x.data ** (exponent - 1)))


def tensor_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(out, (x,), backward)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis=axis) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def getitem(x: Tensor, index: Any) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros(x.shape)
        if _has_fancy_index(index):
            np.add.at(x.grad, index, g)
        else:
            x.grad[index] += g

    return _node(x.data[index], (x,), backward)


def _has_fancy_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(item, list | np.ndarray) for item in items)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g: np.ndarray) -> None:
        for position, part in enumerate(parts):
            _accumulate(part, np.take(g, position, axis=axis))

    return _node(out, tuple(parts), backward)


def cumsum(x: Tensor, axis: int) -> Tensor:
    def backward(g: np.ndarray) -> None:
        reverse = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accumulate(x, reverse)

    return _node(np.cumsum(x.data, axis=axis), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g - probs * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalisation with max subtraction; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (x,), backward)


def gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` under a fresh tape and return (loss, gradients per parameter)."""
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}
    return loss.item(), grads


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
    nudge: float = 0.0,
    seed: int = 0,
) -> float:
    """Compare tape gradients with central finite differences.

    ``loss_fn`` must read the current values of ``params`` each call. Returns
    the maximum over all parameter components of |numeric - analytic| /
    max(floor, |analytic|).

    A positive ``nudge`` first shifts every parameter in place by a seeded
    uniform offset in [-nudge, nudge]. Zero-initialised biases put ReLU inputs
    exactly on the kink, where the two one-sided slopes differ; the offset
    should be well above ``h``.
    """
    if nudge > 0:
        rng = np.random.default_rng(seed)
        for param in params.values():
            param.data += rng.uniform(-nudge, nudge, size=param.shape)
    _, analytic = gradients(loss_fn, params)
    worst = 0.0
    for name, param in params.items():
        grad = analytic[name]
        for index in np.ndindex(param.shape):
            original = param.data[index]
            param.data[index] = original + h
            upper = loss_fn().item()
            param.data[index] = original - h
            lower = loss_fn().item()
            param.data[index] = original
            numeric = (upper - lower) / (2 * h)
            worst = max(worst, abs(numeric - grad[index]) / max(floor, abs(grad[index])))
    return worst
