"""Reverse-mode automatic differentiation on a recorded tape.

Every backward rule is written in terms of the same recorded primitives as the
forward pass, so ``Graph.gradient(..., differentiable=True)`` returns nodes
that can themselves be differentiated (double backprop). Values are float64
numpy arrays; any non-finite intermediate raises immediately.

Example::

    g = Graph()
    x = g.leaf(2.0)
    y = x * x * x
    (dy,) = g.gradient(y, [x], differentiable=True)
    (d2y,) = g.gradient(dy, [x])      # 12.0
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "GraphError",
    "PRIMITIVES",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "broadcast_to",
    "sum_to",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "dot",
    "l2_norm",
    "clamp",
    "arccos",
    "softmax",
    "softmax_cross_entropy",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GraphError(ValueError):
    """Invalid gradient request (non-scalar root, unreachable target, foreign node)."""


class Node:
    """One recorded value on a :class:`Graph`."""

    __slots__ = ("graph", "value", "parents", "op", "attrs", "index")

    def __init__(self, graph: "Graph", value: np.ndarray, parents=(), op="leaf", attrs=None):
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.attrs = attrs or {}
        self.index = -1

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# A primitive is (forward(values, **attrs) -> array, vjp(g, out, operands, needs, **attrs) -> list).
# vjp receives nodes and must build its result from recorded primitives only.
Forward = Callable[..., np.ndarray]
Vjp = Callable[..., list]


class Graph:
    """Append-only arena of nodes.

    Args:
        seed: seed for the graph's generator, used by any stochastic step a
            caller records (the generator is exposed as ``graph.rng``).
    """

    def __init__(self, seed: int = 0):
        self.nodes: list[Node] = []
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Add an input/parameter node holding a float64 copy of ``value``."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value is not finite")
        return self._append(Node(self, arr))

    def constant(self, value) -> Node:
        return self.leaf(value)

    def lift(self, operand) -> Node:
        if isinstance(operand, Node):
            if operand.graph is not self:
                raise GraphError("operand belongs to a different graph")
            return operand
        if not self._recording:
            return Node(self, np.asarray(operand, dtype=np.float64))
        return self.leaf(operand)

    def record(self, primitive: str, operands: Sequence, **attrs) -> Node:
        """Evaluate ``primitive`` on ``operands`` and extend the graph."""
        try:
            forward, _ = PRIMITIVES[primitive]
        except KeyError:
            raise ValueError(f"unknown primitive {primitive!r}") from None
        nodes = [self.lift(o) for o in operands]
        try:
            with np.errstate(all="ignore"):
                out = forward(*[n.value for n in nodes], **attrs)
        except ValueError as exc:
            raise ShapeError(f"{primitive}: {exc}") from exc
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{primitive} produced a non-finite value")
        node = Node(self, out, nodes if self._recording else (), primitive, attrs)
        if self._recording:
            self._append(node)
        return node

    def gradient(self, root: Node, wrt: Iterable[Node], differentiable: bool = False) -> list:
        """Return d(root)/d(target) for every target in ``wrt``.

        With ``differentiable=False`` the results are numpy arrays. With
        ``differentiable=True`` the backward pass is recorded on this graph
        and the results are nodes, so they can be differentiated again.
        """
        wrt = list(wrt)
        if root.graph is not self or any(w.graph is not self for w in wrt):
            raise GraphError("root and targets must belong to this graph")
        if root.value.size != 1:
            raise GraphError(f"root must be scalar, got shape {root.shape}")

        order = _topological_order(root)
        targets = {id(w) for w in wrt}
        # nodes on some path from root down to a target
        needed: dict[int, bool] = {}
        for node in order:
            needed[id(node)] = id(node) in targets or any(needed[id(p)] for p in node.parents)
        missing = [i for i, w in enumerate(wrt) if id(w) not in needed]
        if missing:
            raise GraphError(f"targets {missing} are not reachable from root")

        previous = self._recording
        self._recording = differentiable
        try:
            grads: dict[int, Node] = {id(root): self._seed_like(root)}
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or not node.parents:
                    continue
                needs = [needed[id(p)] for p in node.parents]
                if not any(needs):
                    continue
                _, vjp = PRIMITIVES[node.op]
                contribs = vjp(g, node, node.parents, needs, **node.attrs)
                for parent, need, c in zip(node.parents, needs, contribs):
                    if not need or c is None:
                        continue
                    key = id(parent)
                    grads[key] = c if key not in grads else add(grads[key], c)
        finally:
            self._recording = previous

        out = []
        for w in wrt:
            g = grads.get(id(w))
            if g is None:
                g = self._zeros_like(w, differentiable)
            out.append(g if differentiable else g.value.copy())
        return out

    def _seed_like(self, root: Node) -> Node:
        one = np.ones_like(root.value)
        if self._recording:
            return self.leaf(one)
        return Node(self, one)

    def _zeros_like(self, node: Node, differentiable: bool) -> Node:
        zero = np.zeros_like(node.value)
        return self.leaf(zero) if differentiable else Node(self, zero)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def _graph_of(operands) -> Graph:
    for o in operands:
        if isinstance(o, Node):
            return o.graph
    raise GraphError("at least one operand must be a Node")


def _op(name: str, *operands, **attrs) -> Node:
    return _graph_of(operands).record(name, operands, **attrs)


# ---------------------------------------------------------------- functional API


def add(a, b):
    return _op("add", a, b)


def sub(a, b):
    return _op("sub", a, b)


def mul(a, b):
    return _op("mul", a, b)


def div(a, b):
    return _op("div", a, b)


def neg(a):
    return _op("neg", a)


def matmul(a, b):
    return _op("matmul", a, b)


def transpose(a):
    return _op("transpose", a)


def reshape(a, shape):
    return _op("reshape", a, shape=tuple(shape))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _op("sum", a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape):
    return _op("broadcast_to", a, shape=tuple(shape))


def sum_to(a, shape):
    return _op("sum_to", a, shape=tuple(shape))


def tanh(a):
    return _op("tanh", a)


def sigmoid(a):
    return _op("sigmoid", a)


def softplus(a):
    return _op("softplus", a)


def exp(a):
    return _op("exp", a)


def log(a):
    return _op("log", a)


def sqrt(a):
    return _op("sqrt", a)


def dot(a, b):
    return _op("dot", a, b)


def l2_norm(a, axis=None, keepdims=False):
    return _op("l2_norm", a, axis=axis, keepdims=keepdims)


def clamp(a, lo: float, hi: float):
    return _op("clamp", a, lo=float(lo), hi=float(hi))


def arccos(a):
    return _op("arccos", a)


def softmax(a, axis=-1):
    return _op("softmax", a, axis=axis)


def softmax_cross_entropy(logits, onehot):
    """Row-wise ``logsumexp(z) - <onehot, z>`` for 2-D ``logits``; returns shape (B,)."""
    return _op("softmax_cross_entropy", logits, onehot)


# ---------------------------------------------------------------- forward rules


def _sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot sum shape {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    out = out.reshape(out.shape[lead:]) if lead else out
    if out.shape != shape:
        raise ValueError(f"cannot sum shape {x.shape} to {shape}")
    return out


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return a @ b


def _fwd_dot(a, b):
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    return np.dot(a, b)


def _fwd_arccos(a):
    if np.any(np.abs(a) > 1.0):
        raise ValueError("arccos argument outside [-1, 1]")
    return np.arccos(a)


def _fwd_softmax(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _fwd_sce(z, onehot):
    if z.ndim != 2 or z.shape != onehot.shape:
        raise ValueError(f"softmax_cross_entropy expects matching 2-D operands, got {z.shape}, {onehot.shape}")
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - (onehot * z).sum(axis=1)


def _fwd_l2(a, axis=None, keepdims=False):
    return np.sqrt((a * a).sum(axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------- backward rules


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _vjp_add(g, out, ops, needs):
    a, b = ops
    return [sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None]


def _vjp_sub(g, out, ops, needs):
    a, b = ops
    return [sum_to(g, a.shape) if needs[0] else None, sum_to(neg(g), b.shape) if needs[1] else None]


def _vjp_mul(g, out, ops, needs):
    a, b = ops
    return [
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    ]


def _vjp_div(g, out, ops, needs):
    a, b = ops
    ga = sum_to(div(g, b), a.shape) if needs[0] else None
    gb = sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None
    return [ga, gb]


def _vjp_neg(g, out, ops, needs):
    return [neg(g)]


def _vjp_matmul(g, out, ops, needs):
    a, b = ops
    return [
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    ]


def _vjp_transpose(g, out, ops, needs):
    return [transpose(g)]


def _vjp_reshape(g, out, ops, needs, shape):
    return [reshape(g, ops[0].shape)]


def _vjp_sum(g, out, ops, needs, axis=None, keepdims=False):
    (a,) = ops
    g = reshape(g, _keepdims_shape(a.shape, axis))
    return [broadcast_to(g, a.shape)]


def _vjp_broadcast_to(g, out, ops, needs, shape):
    return [sum_to(g, ops[0].shape)]


def _vjp_sum_to(g, out, ops, needs, shape):
    return [broadcast_to(g, ops[0].shape)]


def _vjp_tanh(g, out, ops, needs):
    return [mul(g, sub(1.0, mul(out, out)))]


def _vjp_sigmoid(g, out, ops, needs):
    return [mul(g, mul(out, sub(1.0, out)))]


def _vjp_softplus(g, out, ops, needs):
    return [mul(g, sigmoid(ops[0]))]


def _vjp_exp(g, out, ops, needs):
    return [mul(g, out)]


def _vjp_log(g, out, ops, needs):
    return [div(g, ops[0])]


def _vjp_sqrt(g, out, ops, needs):
    return [div(mul(g, 0.5), out)]


def _vjp_dot(g, out, ops, needs):
    a, b = ops
    return [mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None]


def _vjp_l2(g, out, ops, needs, axis=None, keepdims=False):
    (a,) = ops
    kshape = _keepdims_shape(a.shape, axis)
    return [mul(reshape(g, kshape), div(a, reshape(out, kshape)))]


def _vjp_clamp(g, out, ops, needs, lo, hi):
    a = ops[0].value
    mask = ((a >= lo) & (a <= hi)).astype(np.float64)
    return [mul(g, mask)]


def _vjp_arccos(g, out, ops, needs):
    (a,) = ops
    return [neg(div(g, sqrt(sub(1.0, mul(a, a)))))]


def _vjp_softmax(g, out, ops, needs, axis=-1):
    s = sum(mul(g, out), axis=axis, keepdims=True)
    return [mul(out, sub(g, s))]


def _vjp_sce(g, out, ops, needs):
    z, onehot = ops
    g_col = reshape(g, (z.shape[0], 1))
    gz = mul(g_col, sub(softmax(z, axis=1), onehot)) if needs[0] else None
    go = None
    if needs[1]:
        # d/d onehot of <onehot, z> term only; logsumexp does not depend on it
        go = neg(mul(g_col, z))
    return [gz, go]


PRIMITIVES: dict[str, tuple[Forward, Vjp]] = {
    "add": (np.add, _vjp_add),
    "sub": (np.subtract, _vjp_sub),
    "mul": (np.multiply, _vjp_mul),
    "div": (np.divide, _vjp_div),
    "neg": (np.negative, _vjp_neg),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "transpose": (np.transpose, _vjp_transpose),
    "reshape": (lambda a, shape: np.reshape(a, shape), _vjp_reshape),
    "sum": (lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _vjp_sum),
    "broadcast_to": (lambda a, shape: np.broadcast_to(a, shape).copy(), _vjp_broadcast_to),
    "sum_to": (lambda a, shape: _sum_to_shape(a, shape), _vjp_sum_to),
    "tanh": (np.tanh, _vjp_tanh),
    "sigmoid": (lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), _vjp_sigmoid),
    "softplus": (lambda a: np.logaddexp(0.0, a), _vjp_softplus),
    "exp": (np.exp, _vjp_exp),
    "log": (np.log, _vjp_log),
    "sqrt": (np.sqrt, _vjp_sqrt),
    "dot": (_fwd_dot, _vjp_dot),
    "l2_norm": (_fwd_l2, _vjp_l2),
    "clamp": (lambda a, lo, hi: np.clip(a, lo, hi), _vjp_clamp),
    "arccos": (_fwd_arccos, _vjp_arccos),
    "softmax": (_fwd_softmax, _vjp_softmax),
    "softmax_cross_entropy": (_fwd_sce, _vjp_sce),
}
