"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` owns every tensor created while building one loss. Leaves
are created through the graph, primitives record a closure that maps the
output gradient to input gradients, and :func:`backward` walks the nodes in
reverse creation order. A graph can be differentiated exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "Tensor",
    "apply",
    "backward",
    "finite_difference_check",
    "PRIMITIVES",
]


class GraphError(RuntimeError):
    pass


class Graph:
    """Ordered node list for a single forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.finished = False
        # active masks of every kinked primitive, read by the
        # finite-difference checker to skip coordinates that cross a kink
        self.kinks: list[np.ndarray] = []

    def _register(self, t: "Tensor") -> int:
        if self.finished:
            raise GraphError("graph already differentiated; build a new one for the next step")
        self.nodes.append(t)
        return len(self.nodes) - 1

    def param(self, value, name: str | None = None) -> "Tensor":
        return Tensor(value, self, requires_grad=True, name=name)

    def constant(self, value, name: str | None = None) -> "Tensor":
        return Tensor(value, self, requires_grad=False, name=name)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, graph: Graph, requires_grad=False, name=None,
                 parents: tuple = (), primitive: str = "leaf", grad_fn=None):
        value = np.asarray(value, dtype=np.float64)
        if any(d <= 0 for d in value.shape):
            raise ValueError(f"tensor shape must be positive, got {value.shape}")
        self.value = value
        self.graph = graph
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.primitive = primitive
        self.grad_fn = grad_fn
        self.grad: np.ndarray | None = None
        self.node_id = graph._register(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.primitive}, id={self.node_id})"

    # operator sugar
    def __add__(self, other):
        return apply("add", self, _lift(other, self.graph))

    __radd__ = __add__

    def __sub__(self, other):
        return apply("add", self, apply("scale", _lift(other, self.graph), c=-1.0))

    def __rsub__(self, other):
        return apply("add", _lift(other, self.graph), apply("scale", self, c=-1.0))

    def __neg__(self):
        return apply("scale", self, c=-1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", self, c=float(other))
        return apply("mul", self, _lift(other, self.graph))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division only by python scalars")
        return apply("scale", self, c=1.0 / float(other))

    def __matmul__(self, other):
        return apply("matmul", self, _lift(other, self.graph))

    def __rmatmul__(self, other):
        return apply("matmul", _lift(other, self.graph), self)

    def sum(self, axis=None):
        return apply("sum", self, axis=axis)

    def mean(self, axis=None):
        return apply("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def relu(self):
        return apply("relu", self)

    def tanh(self):
        return apply("tanh", self)

    def sigmoid(self):
        return apply("sigmoid", self)

    def exp(self):
        return apply("exp", self)

    def square(self):
        return apply("square", self)

    def log_softmax(self, axis=-1):
        return apply("log_softmax", self, axis=axis)


def _lift(x, graph: Graph) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# Each primitive returns (value, grad_fn); grad_fn(g) -> tuple of input grads.

def _matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def grad_fn(g):
        ga = g @ bv.T if bv.ndim == 2 else np.multiply.outer(g, bv)
        if av.ndim == 1:
            gb = np.multiply.outer(av, g)
        else:
            gb = av.T @ g
        return ga, gb
    return av @ bv, grad_fn


def _add(a, b):
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return a.value + b.value, grad_fn


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)
    return av * bv, grad_fn


def _scale(a, c):
    return a.value * c, lambda g: (g * c,)


def _relu(a):
    mask = a.value > 0
    a.graph.kinks.append(mask)
    return np.where(mask, a.value, 0.0), lambda g: (g * mask,)


def _clamp_min(a, floor=0.0):
    mask = a.value > floor
    a.graph.kinks.append(mask)
    return np.where(mask, a.value, floor), lambda g: (g * mask,)


def _sigmoid(a):
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    e = np.exp(a.value[~pos])
    out[~pos] = e / (1.0 + e)
    return out, lambda g: (g * out * (1.0 - out),)


def _log_sigmoid(a):
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        s = np.exp(out)
        return (g * (1.0 - s),)
    return out, grad_fn


def _tanh(a):
    out = np.tanh(a.value)
    return out, lambda g: (g * (1.0 - out * out),)


def _exp(a):
    out = np.exp(a.value)
    return out, lambda g: (g * out,)


def _square(a):
    v = a.value
    return v * v, lambda g: (2.0 * g * v,)


def _log_softmax(a, axis=-1):
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return out, grad_fn


def _cosine(a, b):
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise ValueError(f"cosine: needs equal-length vectors (or row batches), got {a.shape} and {b.shape}")
    u, v = a.value, b.value
    nu = np.sqrt((u * u).sum(axis=-1))
    nv = np.sqrt((v * v).sum(axis=-1))
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("cosine: zero-norm vector")
    dot = (u * v).sum(axis=-1)
    c = dot / (nu * nv)

    def grad_fn(g):
        g_ = np.expand_dims(g, -1)
        c_ = np.expand_dims(c, -1)
        nu_, nv_ = np.expand_dims(nu, -1), np.expand_dims(nv, -1)
        gu = g_ * (v / (nu_ * nv_) - c_ * u / (nu_ * nu_))
        gv = g_ * (u / (nu_ * nv_) - c_ * v / (nv_ * nv_))
        return gu, gv
    return c, grad_fn


def _sum(a, axis=None):
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return a.value.sum(axis=axis), grad_fn


def _mean(a, axis=None):
    n = a.value.size if axis is None else a.shape[axis]
    value, sum_grad = _sum(a, axis)
    return value / n, lambda g: (sum_grad(g)[0] / n,)


def _gather_row(a, index):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ValueError(f"gather_row: index out of range for shape {a.shape}")
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)
    return a.value[index], grad_fn


def _reshape(a, shape):
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}") from None
    return out, lambda g: (g.reshape(old),)


def _concat(*parts, axis=0):
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))
    return out, grad_fn


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "scale": _scale,
    "relu": _relu,
    "clamp_min": _clamp_min,
    "sigmoid": _sigmoid,
    "log_sigmoid": _log_sigmoid,
    "tanh": _tanh,
    "exp": _exp,
    "square": _square,
    "log_softmax": _log_softmax,
    "cosine": _cosine,
    "sum": _sum,
    "mean": _mean,
    "gather_row": _gather_row,
    "reshape": _reshape,
    "concat": _concat,
}


def apply(primitive: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run ``primitive`` forward and register its output in the inputs' graph."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    if not inputs or not all(isinstance(t, Tensor) for t in inputs):
        raise TypeError(f"{primitive}: inputs must be Tensors")
    graph = inputs[0].graph
    if any(t.graph is not graph for t in inputs):
        raise GraphError(f"{primitive}: inputs come from different graphs")
    value, grad_fn = fn(*inputs, **attrs)
    requires_grad = any(t.requires_grad for t in inputs)
    return Tensor(value, graph, requires_grad=requires_grad, parents=inputs,
                  primitive=primitive, grad_fn=grad_fn if requires_grad else None)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns ``{node_id: gradient}`` for every node that requires grad and
    also stores the gradient on ``tensor.grad``.
    """
    graph = root.graph
    if graph.finished:
        raise GraphError("backward already ran on this graph")
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    graph.finished = True
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.value)}
    for node in reversed(graph.nodes[: root.node_id + 1]):
        g = grads.get(node.node_id)
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.graph is not graph or parent.node_id >= node.node_id:
                raise GraphError(f"dangling node {parent.node_id} feeding {node.primitive}")
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = np.asarray(pg, dtype=np.float64)
    out = {}
    for node in graph.nodes:
        if node.requires_grad:
            node.grad = grads.get(node.node_id, np.zeros_like(node.value))
            out[node.node_id] = node.grad
    return out


def _evaluate(f, arrays):
    g = Graph()
    root = f(*[g.constant(a) for a in arrays])
    val = float(np.asarray(root.value).reshape(-1)[0])
    if not math.isfinite(val):
        raise FloatingPointError("objective evaluated to a non-finite value")
    return val, g.kinks


def finite_difference_check(f: Callable[..., Tensor], params: Sequence[np.ndarray],
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` receives one Tensor per entry of ``params`` and returns a scalar
    Tensor. Coordinates whose +/-eps perturbation flips the active set of a
    relu or clamp_min are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    g = Graph()
    leaves = [g.param(p) for p in params]
    root = f(*leaves)
    if not math.isfinite(float(root.value)):
        raise FloatingPointError("objective evaluated to a non-finite value")
    backward(root)
    worst = 0.0
    for leaf, p in zip(leaves, params):
        flat = p.reshape(-1)
        analytic = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, k_plus = _evaluate(f, params)
            flat[i] = orig - eps
            f_minus, k_minus = _evaluate(f, params)
            flat[i] = orig
            if any(not np.array_equal(a, b) for a, b in zip(k_plus, k_minus)):
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
