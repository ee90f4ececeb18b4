"""Reverse-mode automatic differentiation on a tape of array-valued nodes.

Every elementary operation appends a :class:`Node` to a :class:`Tape`.  Node
ids are dense indices in creation order, which is also a valid topological
order, so a backward pass is a single reverse sweep over ids.

Vector-Jacobian products are written once against a small "namespace" of
array functions.  The plain sweep evaluates them with numpy; with
``create_graph=True`` the same rules are evaluated with tape operations, so
the gradient is itself a differentiable node.  That second path is what the
R1 penalty needs (gradient of a squared input-gradient norm).
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "TapeError",
    "OPS",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "pow2",
    "sqrt",
    "tanh",
    "sigmoid",
    "silu",
    "relu",
    "sum",
    "mean",
    "dot",
    "transpose",
    "backward",
    "grad",
    "grad_norm_sq",
]

DTYPE = np.float64

# public elementary op set; transpose/sum_to/broadcast_to are structural helpers
# needed by the matrix and broadcasting rules
OPS = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "pow2", "sqrt",
    "tanh", "sigmoid", "silu", "relu", "sum", "dot",
)


class TapeError(ValueError):
    """Invalid use of the tape (unknown ids, foreign nodes, non-leaf wrt)."""


class Node:
    __slots__ = ("tape", "id", "value", "op", "inputs", "meta", "requires_grad")

    def __init__(self, tape, id, value, op, inputs, meta, requires_grad):
        self.tape = tape
        self.id = id
        self.value = value
        self.op = op
        self.inputs = inputs
        self.meta = meta
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op in ("leaf", "const")

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    # make ndarray <op> Node dispatch to the reflected Node methods
    __array_ufunc__ = None

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
        return dot(self, other)

    def __rmatmul__(self, other):
        return dot(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only node storage.  Single-threaded; one tape per computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        if not 0 <= node_id < len(self.nodes):
            raise TapeError(f"unknown node id {node_id}")
        return self.nodes[node_id]

    def _append(self, value, op, inputs, meta, requires_grad) -> Node:
        node = Node(self, len(self.nodes), value, op, inputs, meta, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = True) -> Node:
        value = np.array(value, dtype=DTYPE)
        return self._append(value, "leaf" if requires_grad else "const", (), None, requires_grad)

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, inputs: Sequence[int], value, meta=None) -> int:
        """Append an op node whose inputs are given by id; returns the new id."""
        if op not in _RULES:
            raise TapeError(f"unknown op {op!r}")
        parents = tuple(self[i] for i in inputs)
        value = np.asarray(value, dtype=DTYPE)
        rg = any(p.requires_grad for p in parents)
        return self._append(value, op, parents, meta, rg).id


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TapeError("operation needs at least one Node argument")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("nodes from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _op(op, inputs, value, meta=None) -> Node:
    tape = inputs[0].tape
    rg = False
    for p in inputs:
        if p.requires_grad:
            rg = True
            break
    return tape._append(value, op, inputs, meta, rg)


def _binary(op, a, b, fn):
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    return _op(op, (a, b), fn(a.value, b.value))


# ---------------------------------------------------------------- elementary ops


def add(a, b) -> Node:
    return _binary("add", a, b, np.add)


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract)


def mul(a, b) -> Node:
    return _binary("mul", a, b, np.multiply)


def div(a, b) -> Node:
    return _binary("div", a, b, np.divide)


def dot(a, b) -> Node:
    """Matrix product of two 2-D nodes (or a 2-D node and a 1-D node)."""
    tape = _tape_of(a, b)
    a = _lift(tape, a)
    b = _lift(tape, b)
    if a.value.ndim == 0 or b.value.ndim == 0:
        raise TapeError("dot needs at least 1-D operands")
    return _op("dot", (a, b), a.value @ b.value)


def neg(a: Node) -> Node:
    return _op("neg", (a,), -a.value)


def exp(a: Node) -> Node:
    return _op("exp", (a,), np.exp(a.value))


def log(a: Node) -> Node:
    return _op("log", (a,), np.log(a.value))


def pow2(a: Node) -> Node:
    return _op("pow2", (a,), a.value * a.value)


def sqrt(a: Node) -> Node:
    return _op("sqrt", (a,), np.sqrt(a.value))


def tanh(a: Node) -> Node:
    return _op("tanh", (a,), np.tanh(a.value))


def _np_sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Node) -> Node:
    return _op("sigmoid", (a,), _np_sigmoid(a.value))


def silu(a: Node) -> Node:
    s = _np_sigmoid(a.value)
    return _op("silu", (a,), a.value * s, s)


def relu(a: Node) -> Node:
    return _op("relu", (a,), np.maximum(a.value, 0.0))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    """Full reduction to a scalar, or reduction along ``axis`` keeping dims."""
    if axis is None:
        return _op("sum", (a,), np.sum(a.value), None)
    return _op("sum", (a,), np.sum(a.value, axis=axis, keepdims=True), axis)


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def transpose(a: Node) -> Node:
    return _op("transpose", (a,), a.value.T)


def sum_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    if a.value.shape == shape:
        return a
    return _op("sum_to", (a,), _np_sum_to(a.value, shape), shape)


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    if a.value.shape == shape:
        return a
    return _op("broadcast_to", (a,), np.broadcast_to(a.value, shape).copy(), a.value.shape)


def _np_sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, x.shape)) if s == 1 and t != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


# ---------------------------------------------------------------- VJP namespaces


class _Numpy:
    """Array arithmetic used by the first-order sweep."""

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    div = staticmethod(np.divide)
    neg = staticmethod(np.negative)
    pow2 = staticmethod(np.square)

    @staticmethod
    def dot(a, b):
        return a @ b

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def sum_to(a, shape):
        return _np_sum_to(a, shape)

    @staticmethod
    def broadcast_to(a, shape):
        return np.broadcast_to(a, shape)

    @staticmethod
    def sigmoid(a):
        return _np_sigmoid(a)

    @staticmethod
    def mask(a):
        return (a > 0).astype(DTYPE)

    @staticmethod
    def value(x):
        return x


class _Graph:
    """Tape arithmetic used when the gradient must itself be differentiable."""

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    div = staticmethod(div)
    neg = staticmethod(neg)
    pow2 = staticmethod(pow2)
    dot = staticmethod(dot)
    transpose = staticmethod(transpose)
    sum_to = staticmethod(sum_to)
    broadcast_to = staticmethod(broadcast_to)
    sigmoid = staticmethod(sigmoid)

    @staticmethod
    def mask(a):
        return a.tape.constant((a.value > 0).astype(DTYPE))

    @staticmethod
    def value(x):
        return x.value


# Each rule maps (F, g, inputs, out, meta) -> tuple of input adjoints, where
# inputs/out are arrays under _Numpy and Nodes under _Graph.


def _shape(F, x):
    return F.value(x).shape


def _vjp_add(F, g, ins, out, meta):
    a, b = ins
    return F.sum_to(g, _shape(F, a)), F.sum_to(g, _shape(F, b))


def _vjp_sub(F, g, ins, out, meta):
    a, b = ins
    return F.sum_to(g, _shape(F, a)), F.sum_to(F.neg(g), _shape(F, b))


def _vjp_mul(F, g, ins, out, meta):
    a, b = ins
    return F.sum_to(F.mul(g, b), _shape(F, a)), F.sum_to(F.mul(g, a), _shape(F, b))


def _vjp_div(F, g, ins, out, meta):
    a, b = ins
    ga = F.div(g, b)
    gb = F.neg(F.mul(ga, out))
    return F.sum_to(ga, _shape(F, a)), F.sum_to(gb, _shape(F, b))


def _vjp_dot(F, g, ins, out, meta):
    a, b = ins
    av, bv = F.value(a), F.value(b)
    if bv.ndim == 1:
        # (n,k)@(k,) -> (n,)
        if F is _Numpy:
            return np.outer(g, bv), a.T @ g
        raise TapeError("second-order dot needs 2-D operands")
    if av.ndim == 1:
        if F is _Numpy:
            return b @ g, np.outer(av, g)
        raise TapeError("second-order dot needs 2-D operands")
    return F.dot(g, F.transpose(b)), F.dot(F.transpose(a), g)


def _vjp_neg(F, g, ins, out, meta):
    return (F.neg(g),)


def _vjp_exp(F, g, ins, out, meta):
    return (F.mul(g, out),)


def _vjp_log(F, g, ins, out, meta):
    return (F.div(g, ins[0]),)


def _vjp_pow2(F, g, ins, out, meta):
    return (F.mul(F.mul(g, ins[0]), 2.0),)


def _vjp_sqrt(F, g, ins, out, meta):
    return (F.div(g, F.mul(out, 2.0)),)


def _vjp_tanh(F, g, ins, out, meta):
    return (F.mul(g, F.sub(1.0, F.pow2(out))),)


def _vjp_sigmoid(F, g, ins, out, meta):
    return (F.mul(g, F.mul(out, F.sub(1.0, out))),)


def _vjp_silu(F, g, ins, out, meta):
    # d/dx x*s(x) = s * (1 + x * (1 - s))
    a = ins[0]
    s = meta if F is _Numpy else sigmoid(a)
    return (F.mul(g, F.mul(s, F.add(1.0, F.mul(a, F.sub(1.0, s))))),)


def _vjp_relu(F, g, ins, out, meta):
    return (F.mul(g, F.mask(ins[0])),)


def _vjp_sum(F, g, ins, out, meta):
    return (F.broadcast_to(g, _shape(F, ins[0])),)


def _vjp_transpose(F, g, ins, out, meta):
    return (F.transpose(g),)


def _vjp_sum_to(F, g, ins, out, meta):
    return (F.broadcast_to(g, _shape(F, ins[0])),)


def _vjp_broadcast_to(F, g, ins, out, meta):
    return (F.sum_to(g, meta),)


_RULES = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "dot": _vjp_dot,
    "neg": _vjp_neg,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "pow2": _vjp_pow2,
    "sqrt": _vjp_sqrt,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "silu": _vjp_silu,
    "relu": _vjp_relu,
    "sum": _vjp_sum,
    "transpose": _vjp_transpose,
    "sum_to": _vjp_sum_to,
    "broadcast_to": _vjp_broadcast_to,
}


# ---------------------------------------------------------------- backward sweep


def backward(tape: Tape, root, create_graph: bool = False) -> list:
    """Reverse sweep from ``root``; returns adjoints indexed by node id.

    Entries are ``None`` for nodes that ``root`` does not depend on (or that
    carry no gradient).  With ``create_graph`` the adjoints are Nodes on the
    same tape, appended after ``root``.
    """
    if isinstance(root, Node):
        if root.tape is not tape:
            raise TapeError("root belongs to a different tape")
        root_id = root.id
    else:
        root_id = int(root)
    root_node = tape[root_id]
    n = root_id + 1
    adj: list = [None] * len(tape)
    seed = np.ones_like(root_node.value)
    adj[root_id] = tape.constant(seed) if create_graph else seed
    F = _Graph if create_graph else _Numpy
    nodes = tape.nodes
    for i in range(n - 1, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        if not node.inputs or not node.requires_grad:
            continue
        if create_graph:
            ins = node.inputs
            out = node
        else:
            ins = tuple(p.value for p in node.inputs)
            out = node.value
        grads = _RULES[node.op](F, g, ins, out, node.meta)
        for p, gp in zip(node.inputs, grads):
            if not p.requires_grad:
                continue
            j = p.id
            if adj[j] is None:
                adj[j] = gp
            else:
                adj[j] = F.add(adj[j], gp)
    if len(adj) < len(tape):
        adj.extend([None] * (len(tape) - len(adj)))
    return adj


def grad(root: Node, wrt: Iterable[Node], create_graph: bool = False) -> list:
    """Adjoints of ``root`` for each node in ``wrt`` (zeros if unreached)."""
    wrt = list(wrt)
    adj = backward(root.tape, root, create_graph=create_graph)
    out = []
    for w in wrt:
        g = adj[w.id]
        if g is None:
            z = np.zeros_like(w.value)
            g = root.tape.constant(z) if create_graph else z
        out.append(g)
    return out


def grad_norm_sq(tape: Tape, root: Node, wrt: Sequence[Node]) -> Node:
    """Differentiable node holding the sum over ``wrt`` of squared gradients.

    ``root`` must be scalar and every ``wrt`` node a leaf.  The first-order
    gradient is replayed onto the tape, so the returned node can be
    differentiated again, e.g. with respect to network parameters.
    """
    if root.value.size != 1:
        raise TapeError("grad_norm_sq needs a scalar root")
    for w in wrt:
        if w.tape is not tape:
            raise TapeError("wrt node belongs to a different tape")
        if w.op != "leaf":
            raise TapeError(f"wrt node {w.id} is not a differentiable leaf")
    total = None
    for g in grad(root, wrt, create_graph=True):
        term = sum(pow2(g))
        total = term if total is None else add(total, term)
    return total
