"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every operation on a :class:`Node` appends a new node to the owning
:class:`Graph`, so ``graph.nodes`` is topologically sorted by construction.
:func:`backward` walks the tape once in reverse.

Also here: Adam (functional form) and a central finite-difference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

EPS_DIV = 1e-8


class InvalidArgumentError(ValueError):
    pass


class NumericalFailureError(ArithmeticError):
    pass


class Graph:
    """An append-only tape of nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _append(self, node: "Node") -> "Node":
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def const(self, value) -> "Node":
        return self._append(Node(self, np.asarray(value, dtype=np.float64), "const"))

    def param(self, name: str, value) -> "Node":
        """Leaf node bound to a named parameter. Repeated calls return the same node."""
        node = self.params.get(name)
        if node is None:
            node = Node(self, np.asarray(value, dtype=np.float64), "param", requires_grad=True)
            node.name = name
            self._append(node)
            self.params[name] = node
        return node

    def op(self, kind: str, inputs: tuple, value: np.ndarray, vjp: Callable) -> "Node":
        requires = any(x.requires_grad for x in inputs)
        node = Node(self, value, kind, inputs=inputs if requires else (), requires_grad=requires)
        if requires:
            node.vjp = vjp
        return self._append(node)


class Node:
    __slots__ = ("graph", "value", "kind", "inputs", "requires_grad", "vjp", "id", "name")
    __array_ufunc__ = None

    def __init__(self, graph, value, kind, inputs=(), requires_grad=False):
        self.graph = graph
        self.value = value
        self.kind = kind
        self.inputs = inputs
        self.requires_grad = requires_grad
        self.vjp = None
        self.id = -1
        self.name = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    return Graph()


def lift(x, graph: Graph | None = None) -> Node:
    if isinstance(x, Node):
        return x
    return (graph or Graph()).const(x)


def _lift_all(*xs):
    g = _graph_of(*xs)
    return g, tuple(lift(x, g) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    g, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return g.op("add", (a, b), a.value + b.value,
                lambda u: (_unbroadcast(u, sa), _unbroadcast(u, sb)))


def sub(a, b) -> Node:
    g, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return g.op("sub", (a, b), a.value - b.value,
                lambda u: (_unbroadcast(u, sa), _unbroadcast(-u, sb)))


def mul(a, b) -> Node:
    g, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    return g.op("mul", (a, b), av * bv,
                lambda u: (_unbroadcast(u * bv, av.shape), _unbroadcast(u * av, bv.shape)))


def div(a, b) -> Node:
    g, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return g.op("div", (a, b), out,
                lambda u: (_unbroadcast(u / bv, av.shape),
                           _unbroadcast(-u * out / bv, bv.shape)))


def exp(x) -> Node:
    x = lift(x)
    out = np.exp(x.value)
    return x.graph.op("exp", (x,), out, lambda u: (u * out,))


def log(x) -> Node:
    x = lift(x)
    xv = x.value
    return x.graph.op("log", (x,), np.log(xv), lambda u: (u / xv,))


def sqrt(x) -> Node:
    x = lift(x)
    out = np.sqrt(x.value)
    return x.graph.op("sqrt", (x,), out, lambda u: (u * 0.5 / out,))


def tanh(x) -> Node:
    x = lift(x)
    out = np.tanh(x.value)
    return x.graph.op("tanh", (x,), out, lambda u: (u * (1.0 - out * out),))


def sigmoid(x) -> Node:
    x = lift(x)
    xv = x.value
    out = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                   np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    return x.graph.op("sigmoid", (x,), out, lambda u: (u * out * (1.0 - out),))


def relu(x) -> Node:
    x = lift(x)
    mask = x.value > 0
    return x.graph.op("relu", (x,), np.where(mask, x.value, 0.0), lambda u: (u * mask,))


def clip(x, lo: float, hi: float) -> Node:
    """Clamp; gradient passes only where the input was inside [lo, hi]."""
    x = lift(x)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return x.graph.op("clip", (x,), np.clip(xv, lo, hi), lambda u: (u * inside,))


# -- structural ----------------------------------------------------------------

def matmul(a, b) -> Node:
    g, (a, b) = _lift_all(a, b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise InvalidArgumentError("matmul needs at least 1-d operands")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise InvalidArgumentError(f"matmul shape mismatch {av.shape} @ {bv.shape}") from exc

    def vjp(u):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        u2 = u
        if av.ndim == 1:
            u2 = np.expand_dims(u2, -2)
        if bv.ndim == 1:
            u2 = np.expand_dims(u2, -1)
        ga = np.matmul(u2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), u2)
        if av.ndim == 1:
            ga = np.squeeze(ga, -2)
        if bv.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return g.op("matmul", (a, b), out, vjp)


def transpose(x) -> Node:
    """Swap the last two axes."""
    x = lift(x)
    return x.graph.op("transpose", (x,), np.swapaxes(x.value, -1, -2),
                      lambda u: (np.swapaxes(u, -1, -2),))


def reshape(x, shape) -> Node:
    x = lift(x)
    old = x.shape
    return x.graph.op("reshape", (x,), x.value.reshape(shape), lambda u: (u.reshape(old),))


def take(x, index) -> Node:
    x = lift(x)
    xv = x.value

    def vjp(u):
        grad = np.zeros_like(xv)
        np.add.at(grad, index, u)
        return (grad,)

    return x.graph.op("take", (x,), xv[index], vjp)


def concat(xs, axis: int = -1) -> Node:
    g, xs = _lift_all(*xs)
    values = [x.value for x in xs]
    ax = axis % values[0].ndim
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def vjp(u):
        return tuple(np.split(u, bounds, axis=ax))

    return g.op("concat", xs, np.concatenate(values, axis=ax), vjp)


def stack(xs, axis: int = 0) -> Node:
    g, xs = _lift_all(*xs)

    def vjp(u):
        return tuple(np.take(u, i, axis=axis) for i in range(len(xs)))

    return g.op("stack", xs, np.stack([x.value for x in xs], axis=axis), vjp)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    shape = x.shape

    def vjp(u):
        if axis is not None and not keepdims:
            u = np.expand_dims(u, axis)
        return (np.broadcast_to(u, shape).copy(),)

    return x.graph.op("sum", (x,), np.sum(x.value, axis=axis, keepdims=keepdims), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return reduce_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- composite -----------------------------------------------------------------

def softmax(x, axis: int = -1, mask=None) -> Node:
    """Max-subtracted softmax. ``mask`` (bool, same shape) excludes entries."""
    x = lift(x)
    xv = x.value
    if xv.size == 0 or xv.shape[axis] == 0:
        raise InvalidArgumentError("softmax of an empty vector")
    if mask is not None:
        xv = np.where(mask, xv, -np.inf)
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(u):
        return (out * (u - np.sum(u * out, axis=axis, keepdims=True)),)

    return x.graph.op("softmax", (x,), out, vjp)


def cosine(a, b, axis: int = -1, eps_div: float = EPS_DIV) -> Node:
    """Broadcasting cosine similarity along ``axis``."""
    g, (a, b) = _lift_all(a, b)
    dot = reduce_sum(a * b, axis=axis)
    na = sqrt(reduce_sum(a * a, axis=axis))
    nb = sqrt(reduce_sum(b * b, axis=axis))
    return dot / (na * nb + eps_div)


def cosine_similarity(u, v, eps_div: float = EPS_DIV) -> Node:
    """u.v / (|u||v| + eps_div) for two vectors."""
    uv = u.value if isinstance(u, Node) else np.asarray(u, dtype=np.float64)
    vv = v.value if isinstance(v, Node) else np.asarray(v, dtype=np.float64)
    if uv.ndim != 1 or vv.ndim != 1 or uv.shape != vv.shape or uv.size == 0:
        raise InvalidArgumentError(f"cosine_similarity needs equal-length vectors, got {uv.shape} and {vv.shape}")
    return cosine(u, v, eps_div=eps_div)


GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_cell(x, h_prev, params: Mapping) -> Node:
    """One GRU step with h_next = (1 - z) * h + z * h_tilde.

    ``params`` maps the names in ``GRU_PARAM_NAMES`` to nodes or arrays. Input
    weights have shape (input_dim, hidden), recurrent ones (hidden, hidden); all
    vectors are rows, so the gates read ``x @ W_z + h @ U_z + b_z``.
    """
    g = _graph_of(x, h_prev, *params.values())
    x, h = lift(x, g), lift(h_prev, g)
    p = {k: lift(params[k], g) for k in GRU_PARAM_NAMES}
    in_dim, hid = p["W_z"].shape
    if x.shape[-1] != in_dim or h.shape[-1] != hid:
        raise InvalidArgumentError(
            f"gru_cell: x {x.shape} / h {h.shape} do not fit W_z {p['W_z'].shape}")
    for k in ("U_z", "U_r", "U_h"):
        if p[k].shape != (hid, hid):
            raise InvalidArgumentError(f"gru_cell: {k} has shape {p[k].shape}")
    z = sigmoid(x @ p["W_z"] + h @ p["U_z"] + p["b_z"])
    r = sigmoid(x @ p["W_r"] + h @ p["U_r"] + p["b_r"])
    h_tilde = tanh(x @ p["W_h"] + (r * h) @ p["U_h"] + p["b_h"])
    return (1.0 - z) * h + z * h_tilde


# -- differentiation -----------------------------------------------------------

def backward(graph: Graph, seed: Node, wrt=None) -> Dict[str, np.ndarray]:
    """Gradients of the scalar ``seed`` w.r.t. every parameter in ``graph``.

    ``wrt`` optionally maps extra parameter names to arrays; those absent
    from the graph get an exact zero gradient.
    """
    if seed.graph is not graph:
        raise InvalidArgumentError("seed node belongs to a different graph")
    if seed.value.size != 1:
        raise InvalidArgumentError(f"backward seed must be scalar, got shape {seed.shape}")
    grads: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.value)}
    nodes = graph.nodes
    for i in range(seed.id, -1, -1):
        node = nodes[i]
        u = grads.pop(i, None) if node.kind != "param" else grads.get(i)
        if u is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(u)):
            if not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    out = {}
    for name, node in graph.params.items():
        gval = grads.get(node.id)
        out[name] = np.zeros_like(node.value) if gval is None else np.asarray(gval, dtype=np.float64).reshape(node.shape)
    if wrt is not None:
        for name, arr in wrt.items():
            out.setdefault(name, np.zeros_like(np.asarray(arr, dtype=np.float64)))
    return out


def finite_difference_gradient(f: Callable[[Dict[str, np.ndarray]], float],
                               params: Mapping[str, np.ndarray],
                               epsilon: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences of ``f`` per coordinate of every parameter."""
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate():
        val = float(f(work))
        if not np.isfinite(val):
            raise NumericalFailureError(f"f evaluated to {val}")
        return val

    evaluate()
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = evaluate()
            flat[i] = orig - epsilon
            fm = evaluate()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error |a - b| / max(|a|, |b|)."""
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale < floor:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam step (minimizing). Returns (new_params, new_state).

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    if lr <= 0:
        raise InvalidArgumentError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(
                f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)
