"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are built define-by-run: every operation returns a :class:`Node`
holding the forward value and a closure per parent that maps the output
gradient to that parent's gradient contribution.  ``backward`` accumulates
gradients in reverse topological order.  Constant operands may be passed as
plain arrays or scalars; they join the forward computation but receive no
gradient.

Everything is float64.  The engine is intentionally small: only the
operations needed by the sequence model, the coupling networks and the
classifier exist.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


def _as_value(x):
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "_grad_fns")

    def __init__(self, value, parents=(), op="leaf", grad_fns=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.op = op
        self._grad_fns = tuple(grad_fns)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"<Node {self.op} shape={self.value.shape}>"

    def __neg__(self):
        return neg(self)

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

    def __matmul__(self, other):
        return matmul(self, other)


def graph_nodes(root: Node) -> list[Node]:
    """All nodes reachable from `root`, in topological order (inputs first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Reverse accumulation from a scalar root into every reachable node."""
    if root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = graph_nodes(root)
    root.grad = root.grad + np.ones_like(root.value)
    for node in reversed(order):
        if not node.parents:
            continue
        g = node.grad
        for parent, fn in zip(node.parents, node._grad_fns):
            if fn is None:
                continue
            parent.grad = parent.grad + fn(g)


# ---------------------------------------------------------------------------
# operation catalogue
# ---------------------------------------------------------------------------

def _binary(a, b, op_name, fwd, grad_a, grad_b):
    av, bv = _as_value(a), _as_value(b)
    try:
        out = fwd(av, bv)
    except ValueError as exc:
        raise ShapeError(f"{op_name}: incompatible shapes {av.shape} and {bv.shape}") from exc
    parents, fns = [], []
    if isinstance(a, Node):
        parents.append(a)
        fns.append(lambda g, av=av, bv=bv: _unbroadcast(grad_a(g, av, bv), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        fns.append(lambda g, av=av, bv=bv: _unbroadcast(grad_b(g, av, bv), bv.shape))
    return Node(out, parents, op_name, fns)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b):
    av, bv = _as_value(a), _as_value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    parents, fns = [], []
    if isinstance(a, Node):
        parents.append(a)
        fns.append(lambda g, bv=bv: g @ bv.T)
    if isinstance(b, Node):
        parents.append(b)
        fns.append(lambda g, av=av: av.T @ g)
    return Node(av @ bv, parents, "matmul", fns)


def _unary(a, op_name, fwd, grad):
    av = _as_value(a)
    out = fwd(av)
    if isinstance(a, Node):
        return Node(out, (a,), op_name, (lambda g, av=av, out=out: grad(g, av, out),))
    return Node(out, (), op_name, ())


def neg(a):
    return _unary(a, "neg", lambda x: -x, lambda g, x, y: -g)


def tanh(a):
    return _unary(a, "tanh", np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, "sigmoid", fwd, lambda g, x, y: g * y * (1.0 - y))


def relu(a):
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0))


def softplus(a):
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def grad(g, x, y):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return g * out

    return _unary(a, "softplus", fwd, grad)


def exp(a):
    return _unary(a, "exp", np.exp, lambda g, x, y: g * y)


def log(a):
    return _unary(a, "log", np.log, lambda g, x, y: g / x)


def log_abs(a):
    """log|x|; gradient 1/x (used for volume terms with signed scales)."""
    return _unary(a, "log_abs", lambda x: np.log(np.abs(x)),
                  lambda g, x, y: g / x)


def powc(a, p: float):
    """Elementwise power with a constant exponent."""
    return _unary(a, f"pow{p}", lambda x: x ** p,
                  lambda g, x, y: g * p * x ** (p - 1.0))


def concat_last(parts):
    """Concatenate nodes/constants along the last axis."""
    values = [_as_value(p) for p in parts]
    out = np.concatenate(values, axis=-1)
    parents, fns = [], []
    offset = 0
    for part, val in zip(parts, values):
        width = val.shape[-1]
        if isinstance(part, Node):
            parents.append(part)
            fns.append(lambda g, o=offset, w=width: g[..., o:o + w])
        offset += width
    return Node(out, parents, "concat", fns)


def concat_rows(parts):
    """Concatenate nodes/constants along the first axis."""
    values = [_as_value(p) for p in parts]
    out = np.concatenate(values, axis=0)
    parents, fns = [], []
    offset = 0
    for part, val in zip(parts, values):
        height = val.shape[0]
        if isinstance(part, Node):
            parents.append(part)
            fns.append(lambda g, o=offset, h=height: g[o:o + h])
        offset += height
    return Node(out, parents, "concat_rows", fns)


def slice_last(a: Node, start: int, stop: int):
    """Slice [start:stop] along the last axis."""
    av = _as_value(a)

    def grad(g, av=av):
        full = np.zeros_like(av)
        full[..., start:stop] = g
        return full

    out = av[..., start:stop]
    if isinstance(a, Node):
        return Node(out, (a,), "slice", (grad,))
    return Node(out, (), "slice", ())


def sum_along(a: Node, axis=None, keepdims: bool = False):
    av = _as_value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad(g, av=av):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    if isinstance(a, Node):
        return Node(out, (a,), "sum", (grad,))
    return Node(out, (), "sum", ())


def mean_along(a: Node, axis=None, keepdims: bool = False):
    av = _as_value(a)
    out = av.mean(axis=axis, keepdims=keepdims)
    count = av.size if axis is None else av.shape[axis]

    def grad(g, av=av):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape) / count

    if isinstance(a, Node):
        return Node(out, (a,), "mean", (grad,))
    return Node(out, (), "mean", ())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, aligned with a fixed parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure(self, params) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in params]
            self.v = [np.zeros_like(p.value) for p in params]


def adam_step(params, state: AdamState, grads=None) -> None:
    """One in-place Adam update; grads default to each node's .grad."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    state.ensure(params)
    if grads is None:
        grads = [p.grad for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter of shape {p.value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all .grad arrays so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm
