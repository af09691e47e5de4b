"""Minimal reverse-mode autodiff and dense-network kernel.

Everything is float64 numpy. A :class:`Tensor` records the operation that
produced it when any input is tracked and tracking is enabled (see
:func:`no_grad`); :meth:`Tensor.backward` then walks the tape in reverse
topological order and accumulates gradients into tracked leaves.

The tape switch is thread-local so separate nets may train on separate
threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

_tape_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_tape_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = previous


class Tensor:
    """Dense float64 array that can take part in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        """Populate ``.grad`` of every tracked leaf reachable from this scalar."""
        if not self.requires_grad:
            raise UsageError("backward() called on a loss that is not connected to any tracked tensor")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root whose backward uses the zero subgradient at 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _node(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def log_softmax(a, axis: int = -1) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no tape)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels, sample_weights=None) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``.

    ``sample_weights`` multiply the per-sample terms before the mean.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    nll = neg(tsum(mul(log_softmax(logits), onehot), axis=1))
    if sample_weights is not None:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != labels.shape:
            raise ShapeError(f"sample_weights {w.shape} do not match batch {labels.shape}")
        nll = mul(nll, w)
    return mean(nll)


def kl_divergence(teacher_logits, student_logits) -> Tensor:
    """Mean over rows of KL(softmax(teacher) || softmax(student)).

    The teacher is treated as a constant even if it is a tracked tensor.
    """
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    student = as_tensor(student_logits)
    if teacher.shape != student.shape or student.ndim != 2:
        raise ShapeError(f"teacher {teacher.shape} and student {student.shape} must be equal 2-D shapes")
    p = softmax(teacher, axis=1)
    log_p = np.log(np.where(p > 0, p, 1.0))
    entropy_part = (p * log_p).sum(axis=1)
    cross = tsum(mul(log_softmax(student), p), axis=1)
    return mean(sub(entropy_part, cross))


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# dense nets
# ---------------------------------------------------------------------------

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: Tensor        # [in, out]
    bias: Tensor          # [out]
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenseNet:
    """Feedforward chain of affine layers, each followed by relu or identity."""

    def __init__(self, layers: Sequence[Layer]) -> None:
        if not layers:
            raise DomainError("a DenseNet needs at least one layer")
        for i, (prev, nxt) in enumerate(zip(layers, layers[1:])):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer {i} outputs {prev.out_dim} but layer {i + 1} expects {nxt.in_dim}")
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "DenseNet":
        """Glorot-initialised net with layer widths ``sizes`` (input first)."""
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise DomainError(f"invalid layer sizes {list(sizes)}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(
                Tensor(glorot_uniform(fan_in, fan_out, rng), requires_grad=True),
                Tensor(np.zeros(fan_out), requires_grad=True),
                act,
            ))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"expected input [batch x {self.input_dim}], got {h.shape}")
        for layer in self.layers:
            h = add(matmul(h, layer.weight), layer.bias)
            if layer.activation == "relu":
                h = relu(h)
        return h

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError("state length does not match parameter count")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ShapeError(f"state shape {np.shape(a)} does not match {p.shape}")
            p.data = np.array(a, dtype=np.float64)

    def is_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.parameters())


class SGD:
    """Momentum SGD: ``v <- m*v + g``, ``p <- p - lr*v``; grads cleared after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9) -> None:
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise DomainError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise UsageError("step() called before gradients were populated")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering ``range(n)`` once."""
    if batch_size <= 0:
        raise DomainError("batch_size must be positive")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
