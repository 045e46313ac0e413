"""Reverse-mode automatic differentiation on a dynamically built graph.

Every primitive records an immutable :class:`Node` on the active
:class:`Graph`. VJPs are themselves written with primitives, so calling
``grad(..., create_graph=True)`` yields differentiable gradient nodes and
meta-gradients can flow through unrolled SGD updates.

Broadcasting between two operands is limited to three cases:

  * one side is a scalar (shape ``()``),
  * one shape is a trailing suffix of the other (``(4,)`` against ``(16, 4)``),
  * same rank where one side has size 1 in the last axis (``(16, 1)`` against
    ``(16, 4)``, i.e. a keepdims reduction being re-expanded).

Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base import ShapeError

_LOGGER = logging.getLogger("autodiff")

Shape = Tuple[int, ...]
Operand = Union["Node", np.ndarray, float, int]

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "sigmoid", "tanh",
    "exp", "log", "square", "sum", "mean", "max", "softmax", "concat",
    "slice", "reshape", "dot",
)
# Helpers used by VJPs and by the learners.
EXTRA_OPS = ("log_softmax", "softplus", "transpose", "broadcast_to", "sum_to", "unslice")

_LEAF_OPS = ("leaf", "const")

_local = threading.local()


def _graph_stack() -> List["Graph"]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = [Graph()]
        _local.graphs = stack
    return stack


def current_graph() -> "Graph":
    return _graph_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Nodes created inside the block never require gradients."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Graph:
    """Append-only node store plus a leaf registry (parameter name -> node id).

    Use as a context manager to make it the active graph of the current
    thread. Long-running loops open a fresh graph per meta-cycle so that
    memory stays bounded.
    """

    def __init__(self, name: str = "") -> None:
        self.name = name
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: "Node") -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, name: str, value: Any, requires_grad: bool = True) -> "Node":
        node = Node._make(self, "leaf", np.array(value, dtype=np.float64), (), {}, requires_grad)
        node.name = name
        if name:
            self.leaves[name] = node.id
        return node

    def constant(self, value: Any) -> "Node":
        return Node._make(self, "const", np.array(value, dtype=np.float64), (), {}, False)

    def lookup(self, name: str) -> "Node":
        return self.nodes[self.leaves[name]]

    def replay(self) -> bool:
        """Re-evaluate every interior node in creation order.

        Returns True when every recomputed value equals the cached one
        bit-for-bit.
        """
        for node in self.nodes:
            if node.op in _LEAF_OPS:
                continue
            vals = [inp.value for inp in node.inputs]
            if node.op == "stop_gradient":
                fresh = vals[0]
            else:
                fresh = _FORWARD[node.op](vals, node.attrs)
            if not np.array_equal(fresh, node.value):
                _LOGGER.debug("Replay mismatch at node %d (%s)", node.id, node.op)
                return False
        return True


class Node:
    __slots__ = ("id", "graph", "value", "op", "inputs", "attrs", "requires_grad", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self) -> None:  # use Node._make / primitive()
        raise TypeError("Node objects are created by primitives or Graph.leaf")

    @classmethod
    def _make(cls, graph: Graph, op: str, value: np.ndarray, inputs: Tuple["Node", ...],
              attrs: Dict[str, Any], requires_grad: bool) -> "Node":
        node = object.__new__(cls)
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        node.graph = graph
        node.value = value
        node.op = op
        node.inputs = inputs
        node.attrs = attrs
        node.requires_grad = bool(requires_grad) and grad_enabled()
        node.name = ""
        node.id = graph._record(node)
        return node

    @property
    def shape(self) -> Shape:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(inp.id for inp in self.inputs)

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Node":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Node":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Node":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Node":
        return div(other, self)

    def __neg__(self) -> "Node":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Node":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Node":
        return slice_(self, key)


# --------------------------------------------------------------------------
# shape rules

def broadcast_shape(op: str, a: Shape, b: Shape) -> Shape:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    if len(a) == len(b) and a[:-1] == b[:-1]:
        if a[-1] == 1:
            return b
        if b[-1] == 1:
            return a
    raise ShapeError(op, [a, b], "only scalar, trailing-suffix or size-1 last-axis broadcasting is allowed")


def _normalize_axis(op: str, axis: Optional[int], shape: Shape) -> Optional[int]:
    if axis is None:
        return None
    nd = len(shape)
    if not -nd <= axis < nd:
        raise ShapeError(op, [shape], f"axis {axis} out of range")
    return axis % nd


def _kept_shape(shape: Shape, axis: Optional[int]) -> Shape:
    if axis is None:
        return tuple(1 for _ in shape)
    return tuple(1 if i == axis else s for i, s in enumerate(shape))


def _sum_to_array(x: np.ndarray, shape: Shape) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead > 0:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def _normalize_key(key: Any) -> Tuple[Any, ...]:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)) and k is not Ellipsis:
            raise TypeError(f"slice: only basic indexing is supported, got {type(k).__name__}")
    return tuple(int(k) if isinstance(k, np.integer) else k for k in key)


def _check(op: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    if op in ("add", "sub", "mul", "div"):
        broadcast_shape(op, shapes[0], shapes[1])
    elif op == "matmul":
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(op, shapes, "expected (m, k) @ (k, n)")
    elif op == "dot":
        a, b = shapes
        if len(a) != 1 or a != b:
            raise ShapeError(op, shapes, "expected two vectors of equal length")
    elif op in ("sum", "mean", "max"):
        attrs["axis"] = _normalize_axis(op, attrs.get("axis"), shapes[0])
        attrs.setdefault("keepdims", False)
    elif op in ("softmax", "log_softmax"):
        if len(shapes[0]) < 1:
            raise ShapeError(op, shapes, "needs at least one axis")
    elif op == "transpose":
        if len(shapes[0]) != 2:
            raise ShapeError(op, shapes, "only 2-D transpose is supported")
    elif op == "concat":
        axis = attrs.get("axis", 0)
        first = shapes[0]
        axis = _normalize_axis(op, axis, first)
        attrs["axis"] = axis
        for s in shapes[1:]:
            if len(s) != len(first) or any(x != y for i, (x, y) in enumerate(zip(s, first)) if i != axis):
                raise ShapeError(op, [first, s], f"mismatch outside concat axis {axis}")
    elif op == "reshape":
        target = tuple(attrs["shape"])
        try:
            resolved = np.empty(shapes[0]).reshape(target).shape
        except ValueError:
            raise ShapeError(op, [shapes[0], target], "element counts differ") from None
        attrs["shape"] = resolved
    elif op == "broadcast_to":
        target = tuple(attrs["shape"])
        if not _expandable(shapes[0], target):
            raise ShapeError(op, [shapes[0], target])
    elif op == "sum_to":
        target = tuple(attrs["shape"])
        if not _expandable(target, shapes[0]):
            raise ShapeError(op, [shapes[0], target])


def _expandable(src: Shape, target: Shape) -> bool:
    # internal expansion used by reductions and their adjoints; size-1 axes anywhere
    if len(src) > len(target):
        return False
    tail = target[len(target) - len(src):]
    return all(s == t or s == 1 for s, t in zip(src, tail))


# --------------------------------------------------------------------------
# forward rules

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _max_mask(x: np.ndarray, axis: Optional[int]) -> np.ndarray:
    """One-hot mask of the maximum; the lowest index wins ties."""
    mask = np.zeros_like(x)
    if axis is None:
        mask.flat[int(np.argmax(x))] = 1.0
        return mask
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def _unslice_forward(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    out = np.zeros(attrs["shape"])
    out[attrs["key"]] = vals[0]
    return out


_FORWARD: Dict[str, Callable[[List[np.ndarray], Dict[str, Any]], np.ndarray]] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "neg": lambda v, a: -v[0],
    "matmul": lambda v, a: v[0] @ v[1],
    "dot": lambda v, a: np.dot(v[0], v[1]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "square": lambda v, a: v[0] * v[0],
    "softplus": lambda v, a: np.logaddexp(0.0, v[0]),
    "sum": lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "mean": lambda v, a: np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "max": lambda v, a: np.max(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "softmax": lambda v, a: _softmax(v[0]),
    "log_softmax": lambda v, a: _log_softmax(v[0]),
    "concat": lambda v, a: np.concatenate(v, axis=a["axis"]),
    "slice": lambda v, a: np.array(v[0][a["key"]]),
    "unslice": _unslice_forward,
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "transpose": lambda v, a: v[0].T.copy(),
    "broadcast_to": lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
    "sum_to": lambda v, a: _sum_to_array(v[0], a["shape"]),
}


# --------------------------------------------------------------------------
# graph construction

def as_node(x: Operand, graph: Optional[Graph] = None) -> Node:
    if isinstance(x, Node):
        return x
    return (graph or current_graph()).constant(x)


def constant(value: Any) -> Node:
    return current_graph().constant(value)


def leaf(name: str, value: Any, requires_grad: bool = True) -> Node:
    return current_graph().leaf(name, value, requires_grad)


def primitive(op_tag: str, *inputs: Operand, **attrs: Any) -> Node:
    """Record ``op_tag`` applied to ``inputs`` and return the new node."""
    if op_tag not in _FORWARD:
        raise ValueError(f"unknown op tag {op_tag!r}")
    graph = next((x.graph for x in inputs if isinstance(x, Node)), None) or current_graph()
    nodes = tuple(as_node(x, graph) for x in inputs)
    for n in nodes:
        if n.graph is not graph:
            raise ValueError(f"{op_tag}: node {n.id} belongs to a different graph")
    _check(op_tag, [n.shape for n in nodes], attrs)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        value = _FORWARD[op_tag]([n.value for n in nodes], attrs)
    return Node._make(graph, op_tag, value, nodes, attrs, any(n.requires_grad for n in nodes))


def add(a: Operand, b: Operand) -> Node:
    return primitive("add", a, b)


def sub(a: Operand, b: Operand) -> Node:
    return primitive("sub", a, b)


def mul(a: Operand, b: Operand) -> Node:
    return primitive("mul", a, b)


def div(a: Operand, b: Operand) -> Node:
    return primitive("div", a, b)


def neg(a: Operand) -> Node:
    return primitive("neg", a)


def matmul(a: Operand, b: Operand) -> Node:
    return primitive("matmul", a, b)


def dot(a: Operand, b: Operand) -> Node:
    return primitive("dot", a, b)


def relu(a: Operand) -> Node:
    return primitive("relu", a)


def sigmoid(a: Operand) -> Node:
    return primitive("sigmoid", a)


def tanh(a: Operand) -> Node:
    return primitive("tanh", a)


def exp(a: Operand) -> Node:
    return primitive("exp", a)


def log(a: Operand) -> Node:
    return primitive("log", a)


def square(a: Operand) -> Node:
    return primitive("square", a)


def softplus(a: Operand) -> Node:
    return primitive("softplus", a)


def sum(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    return primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    return primitive("mean", a, axis=axis, keepdims=keepdims)


def max(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    return primitive("max", a, axis=axis, keepdims=keepdims)


def softmax(a: Operand) -> Node:
    """Softmax over the last axis."""
    return primitive("softmax", a)


def log_softmax(a: Operand) -> Node:
    return primitive("log_softmax", a)


def concat(parts: Sequence[Operand], axis: int = 0) -> Node:
    return primitive("concat", *parts, axis=axis)


def slice_(a: Operand, key: Any) -> Node:
    return primitive("slice", a, key=_normalize_key(key))


def unslice(a: Operand, key: Any, shape: Shape) -> Node:
    return primitive("unslice", a, key=_normalize_key(key), shape=tuple(shape))


def reshape(a: Operand, shape: Sequence[int]) -> Node:
    return primitive("reshape", a, shape=tuple(shape))


def transpose(a: Operand) -> Node:
    return primitive("transpose", a)


def broadcast_to(a: Operand, shape: Sequence[int]) -> Node:
    return primitive("broadcast_to", a, shape=tuple(shape))


def sum_to(a: Operand, shape: Sequence[int]) -> Node:
    a = as_node(a)
    if a.shape == tuple(shape):
        return a
    return primitive("sum_to", a, shape=tuple(shape))


def stop_gradient(v: Node) -> Node:
    """Same forward value as ``v``; no gradient flows through the result."""
    v = as_node(v)
    return Node._make(v.graph, "stop_gradient", v.value, (v,), {}, False)


def flatten(parts: Sequence[Node]) -> Node:
    return concat([reshape(p, (-1,)) for p in parts], axis=0)


# --------------------------------------------------------------------------
# vector-Jacobian products, one per op

VJP = Callable[[Node, Node], List[Optional[Node]]]
_VJPS: Dict[str, VJP] = {}


def defvjp(op_tag: str) -> Callable[[VJP], VJP]:
    def deco(fn: VJP) -> VJP:
        _VJPS[op_tag] = fn
        return fn
    return deco


@defvjp("add")
def _vjp_add(g: Node, node: Node) -> List[Optional[Node]]:
    return [g, g]


@defvjp("sub")
def _vjp_sub(g: Node, node: Node) -> List[Optional[Node]]:
    return [g, neg(g)]


@defvjp("mul")
def _vjp_mul(g: Node, node: Node) -> List[Optional[Node]]:
    a, b = node.inputs
    return [mul(g, b), mul(g, a)]


@defvjp("div")
def _vjp_div(g: Node, node: Node) -> List[Optional[Node]]:
    a, b = node.inputs
    gb = div(g, b)
    return [gb, neg(div(mul(gb, a), b))]


@defvjp("neg")
def _vjp_neg(g: Node, node: Node) -> List[Optional[Node]]:
    return [neg(g)]


@defvjp("matmul")
def _vjp_matmul(g: Node, node: Node) -> List[Optional[Node]]:
    a, b = node.inputs
    return [matmul(g, transpose(b)), matmul(transpose(a), g)]


@defvjp("dot")
def _vjp_dot(g: Node, node: Node) -> List[Optional[Node]]:
    a, b = node.inputs
    return [mul(g, b), mul(g, a)]


@defvjp("relu")
def _vjp_relu(g: Node, node: Node) -> List[Optional[Node]]:
    mask = node.graph.constant((node.inputs[0].value > 0).astype(np.float64))
    return [mul(g, mask)]


@defvjp("sigmoid")
def _vjp_sigmoid(g: Node, node: Node) -> List[Optional[Node]]:
    return [mul(g, mul(node, sub(1.0, node)))]


@defvjp("tanh")
def _vjp_tanh(g: Node, node: Node) -> List[Optional[Node]]:
    return [mul(g, sub(1.0, square(node)))]


@defvjp("exp")
def _vjp_exp(g: Node, node: Node) -> List[Optional[Node]]:
    return [mul(g, node)]


@defvjp("log")
def _vjp_log(g: Node, node: Node) -> List[Optional[Node]]:
    return [div(g, node.inputs[0])]


@defvjp("square")
def _vjp_square(g: Node, node: Node) -> List[Optional[Node]]:
    return [mul(g, mul(2.0, node.inputs[0]))]


@defvjp("softplus")
def _vjp_softplus(g: Node, node: Node) -> List[Optional[Node]]:
    return [mul(g, sigmoid(node.inputs[0]))]


def _expand_reduced(g: Node, node: Node) -> Node:
    src = node.inputs[0]
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if not keepdims:
        g = reshape(g, _kept_shape(src.shape, axis))
    return broadcast_to(g, src.shape)


@defvjp("sum")
def _vjp_sum(g: Node, node: Node) -> List[Optional[Node]]:
    return [_expand_reduced(g, node)]


@defvjp("mean")
def _vjp_mean(g: Node, node: Node) -> List[Optional[Node]]:
    src = node.inputs[0]
    axis = node.attrs["axis"]
    count = src.value.size if axis is None else src.shape[axis]
    return [div(_expand_reduced(g, node), float(count))]


@defvjp("max")
def _vjp_max(g: Node, node: Node) -> List[Optional[Node]]:
    src = node.inputs[0]
    mask = node.graph.constant(_max_mask(src.value, node.attrs["axis"]))
    return [mul(_expand_reduced(g, node), mask)]


@defvjp("softmax")
def _vjp_softmax(g: Node, node: Node) -> List[Optional[Node]]:
    inner = sum(mul(g, node), axis=-1, keepdims=True)
    return [mul(node, sub(g, inner))]


@defvjp("log_softmax")
def _vjp_log_softmax(g: Node, node: Node) -> List[Optional[Node]]:
    total = sum(g, axis=-1, keepdims=True)
    return [sub(g, mul(exp(node), total))]


@defvjp("concat")
def _vjp_concat(g: Node, node: Node) -> List[Optional[Node]]:
    axis = node.attrs["axis"]
    out: List[Optional[Node]] = []
    start = 0
    for inp in node.inputs:
        width = inp.shape[axis]
        key = tuple(slice(None) for _ in range(axis)) + (slice(start, start + width),)
        out.append(slice_(g, key))
        start += width
    return out


@defvjp("slice")
def _vjp_slice(g: Node, node: Node) -> List[Optional[Node]]:
    return [unslice(g, node.attrs["key"], node.inputs[0].shape)]


@defvjp("unslice")
def _vjp_unslice(g: Node, node: Node) -> List[Optional[Node]]:
    return [slice_(g, node.attrs["key"])]


@defvjp("reshape")
def _vjp_reshape(g: Node, node: Node) -> List[Optional[Node]]:
    return [reshape(g, node.inputs[0].shape)]


@defvjp("transpose")
def _vjp_transpose(g: Node, node: Node) -> List[Optional[Node]]:
    return [transpose(g)]


@defvjp("broadcast_to")
def _vjp_broadcast_to(g: Node, node: Node) -> List[Optional[Node]]:
    return [sum_to(g, node.inputs[0].shape)]


@defvjp("sum_to")
def _vjp_sum_to(g: Node, node: Node) -> List[Optional[Node]]:
    return [broadcast_to(g, node.inputs[0].shape)]


# --------------------------------------------------------------------------
# differentiation

def _live_nodes(output: Node) -> List[Node]:
    """Nodes on a gradient path into ``output``, newest first."""
    seen: Dict[int, Node] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.inputs)
    return [seen[i] for i in sorted(seen, reverse=True)]


def has_gradient_path(output: Node, source: Node) -> bool:
    return any(n is source for n in _live_nodes(output))


def grad(output: Node, wrt: Sequence[Node], create_graph: bool = False) -> List[Node]:
    """Gradients of the scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned gradients are live nodes that can be
    differentiated again; otherwise they are constants. A ``wrt`` node that
    does not reach ``output`` gets a zero gradient of its own shape.
    """
    if output.shape != ():
        raise ValueError(f"grad requires a scalar output, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise ValueError(f"grad: node {w.id} ({w.name or w.op}) does not require grad")
    graph = output.graph
    with graph:
        ctx = _noop() if create_graph else no_grad()
        with ctx:
            adj: Dict[int, Node] = {output.id: graph.constant(1.0)}
            for node in _live_nodes(output):
                g = adj.get(node.id)
                if g is None or node.op in _LEAF_OPS:
                    continue
                parts = _VJPS[node.op](g, node)
                for inp, gi in zip(node.inputs, parts):
                    if gi is None or not inp.requires_grad:
                        continue
                    gi = sum_to(gi, inp.shape)
                    prev = adj.get(inp.id)
                    adj[inp.id] = gi if prev is None else add(prev, gi)
        out: List[Node] = []
        for w in wrt:
            g = adj.get(w.id)
            if g is None:
                g = graph.constant(np.zeros(w.shape))
            elif not create_graph:
                g = graph.constant(g.value)
            out.append(g)
    return out


@contextmanager
def _noop() -> Iterator[None]:
    yield


def values(nodes: Sequence[Node]) -> List[np.ndarray]:
    return [np.array(n.value) for n in nodes]
