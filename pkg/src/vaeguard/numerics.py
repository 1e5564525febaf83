"""Dense float64 arrays with a small reverse-mode automatic differentiation engine.

A :class:`Graph` records primitive operations as they are created.  Inputs may
be bound to concrete arrays at creation time (eager tracing, values are
computed immediately) or declared by shape only (values appear after
:func:`forward_eval`).  Either way the recorded graph can be replayed with new
input values and differentiated with :func:`backward`.

Only a fixed primitive set is supported: add, sub, mul, matmul, sigmoid,
tanh, softplus, exp, log, sum, square, bias_add and clip.  Shapes are checked
when a node is created and no implicit broadcasting happens except in
``bias_add``.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(value) -> Tensor:
    """Return ``value`` as a C-contiguous float64 array."""
    return np.asarray(value, dtype=np.float64, order="C")


def check_finite(value: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return value


# --- primitive forward rules -------------------------------------------------

def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sum_fwd(vals, attrs):
    axis = attrs["axis"]
    if axis is None:
        return np.asarray(vals[0].sum(), dtype=np.float64)
    return vals[0].sum(axis=axis)


_FORWARD: dict[str, Callable] = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "matmul": lambda v, a: v[0] @ v[1],
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "softplus": lambda v, a: _softplus(v[0]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "sum": _sum_fwd,
    "square": lambda v, a: v[0] * v[0],
    "bias_add": lambda v, a: v[0] + v[1],
    "clip": lambda v, a: np.clip(v[0], a["lo"], a["hi"]),
}


# --- primitive vector-Jacobian products -------------------------------------
# Each rule gets (upstream grad, parent values, output value, attrs, needs)
# and returns one entry per parent (None where needs[i] is False).

def _vjp_matmul(g, v, out, attrs, needs):
    a, b = v
    ga = gb = None
    if a.ndim == 2 and b.ndim == 2:
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            gb = a.T @ g
    elif a.ndim == 2:  # (m,k) @ (k,)
        if needs[0]:
            ga = np.outer(g, b)
        if needs[1]:
            gb = a.T @ g
    else:  # (k,) @ (k,n)
        if needs[0]:
            ga = b @ g
        if needs[1]:
            gb = np.outer(a, g)
    return [ga, gb]


def _vjp_sum(g, v, out, attrs, needs):
    shape = v[0].shape
    axis = attrs["axis"]
    if axis is None:
        return [np.full(shape, float(g))]
    return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]


def _vjp_bias_add(g, v, out, attrs, needs):
    gb = None
    if needs[1]:
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return [g if needs[0] else None, gb]


def _vjp_clip(g, v, out, attrs, needs):
    x = v[0]
    mask = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return [g * mask]


_VJP: dict[str, Callable] = {
    "add": lambda g, v, o, a, n: [g, g],
    "sub": lambda g, v, o, a, n: [g, -g if n[1] else None],
    "mul": lambda g, v, o, a, n: [g * v[1] if n[0] else None, g * v[0] if n[1] else None],
    "matmul": _vjp_matmul,
    "sigmoid": lambda g, v, o, a, n: [g * o * (1.0 - o)],
    "tanh": lambda g, v, o, a, n: [g * (1.0 - o * o)],
    "softplus": lambda g, v, o, a, n: [g * _sigmoid(v[0])],
    "exp": lambda g, v, o, a, n: [g * o],
    "log": lambda g, v, o, a, n: [g / v[0]],
    "sum": _vjp_sum,
    "square": lambda g, v, o, a, n: [2.0 * g * v[0]],
    "bias_add": _vjp_bias_add,
    "clip": _vjp_clip,
}

_UNARY = {"sigmoid", "tanh", "softplus", "exp", "log", "square"}


class Node:
    """One recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "index", "op", "parents", "shape", "value",
                 "attrs", "name", "needs_grad")

    def __init__(self, graph, index, op, parents, shape, value, attrs=None,
                 name=None, needs_grad=False):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.shape = shape
        self.value = value
        self.attrs = attrs or {}
        self.name = name
        self.needs_grad = needs_grad

    def __repr__(self):
        label = self.name or self.op
        return f"Node#{self.index}({label}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.const(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.sub(self._lift(0.0), self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


class Graph:
    """Recorder for a computation built from the fixed primitive set."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._evaluated = True

    # leaves

    def input(self, name: str, value=None, *, shape=None, requires_grad=True) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        if value is not None:
            value = as_tensor(value)
            shape = value.shape
        elif shape is None:
            raise GraphError(f"input {name!r} needs a value or a shape")
        else:
            self._evaluated = False
        node = self._append("input", [], tuple(shape), value, name=name,
                            needs_grad=requires_grad)
        self.inputs[name] = node
        return node

    def const(self, value) -> Node:
        value = as_tensor(value)
        return self._append("const", [], value.shape, value)

    def output(self, name: str, node: Node) -> Node:
        self._own(node)
        self.outputs[name] = node
        return node

    # primitives

    def add(self, a, b):
        return self._elementwise("add", a, b)

    def sub(self, a, b):
        return self._elementwise("sub", a, b)

    def mul(self, a, b):
        return self._elementwise("mul", a, b)

    def matmul(self, a, b):
        self._own(a, b)
        sa, sb = a.shape, b.shape
        if len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0]:
            shape = (sa[0], sb[1])
        elif len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
            shape = (sa[0],)
        elif len(sa) == 1 and len(sb) == 2 and sa[0] == sb[0]:
            shape = (sb[1],)
        else:
            raise ShapeError(f"matmul: incompatible shapes {sa} and {sb} ({a!r} @ {b!r})")
        return self._apply("matmul", [a, b], shape)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def tanh(self, a):
        return self._unary("tanh", a)

    def softplus(self, a):
        return self._unary("softplus", a)

    def exp(self, a):
        return self._unary("exp", a)

    def log(self, a):
        return self._unary("log", a)

    def square(self, a):
        return self._unary("square", a)

    def sum(self, a, axis=None):
        self._own(a)
        if axis is None:
            shape = ()
        else:
            if not -len(a.shape) <= axis < len(a.shape):
                raise ShapeError(f"sum: axis {axis} out of range for {a!r}")
            axis = axis % len(a.shape)
            shape = a.shape[:axis] + a.shape[axis + 1:]
        return self._apply("sum", [a], shape, {"axis": axis})

    def bias_add(self, a, b):
        self._own(a, b)
        if len(b.shape) != 1 or not a.shape or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias_add: bias {b.shape} does not match trailing axis of {a.shape}")
        return self._apply("bias_add", [a, b], a.shape)

    def clip(self, a, lo: float, hi: float):
        self._own(a)
        return self._apply("clip", [a], a.shape, {"lo": float(lo), "hi": float(hi)})

    # internals

    def _own(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.graph is not self:
                raise GraphError(f"{n!r} does not belong to this graph")

    def _elementwise(self, op, a, b):
        self._own(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} ({a!r}, {b!r})")
        return self._apply(op, [a, b], a.shape)

    def _unary(self, op, a):
        self._own(a)
        return self._apply(op, [a], a.shape)

    def _apply(self, op, parents, shape, attrs=None):
        value = None
        if all(p.value is not None for p in parents):
            value = _FORWARD[op]([p.value for p in parents], attrs)
        needs = any(p.needs_grad for p in parents)
        return self._append(op, parents, tuple(shape), value, attrs, needs_grad=needs)

    def _append(self, op, parents, shape, value, attrs=None, name=None, needs_grad=False):
        node = Node(self, len(self.nodes), op, parents, shape, value, attrs, name, needs_grad)
        self.nodes.append(node)
        return node


def forward_eval(graph: Graph, inputs: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Re-evaluate ``graph`` with the given input bindings and return its outputs.

    Inputs not named in ``inputs`` keep their previously bound value.
    """
    inputs = dict(inputs or {})
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise GraphError(f"unknown inputs: {sorted(unknown)}")
    for node in graph.nodes:
        if node.op == "input":
            if node.name in inputs:
                value = as_tensor(inputs[node.name])
                if value.shape != node.shape:
                    raise ShapeError(
                        f"input {node.name!r} (node #{node.index}): expected shape "
                        f"{node.shape}, got {value.shape}")
                node.value = value
            elif node.value is None:
                raise GraphError(f"input {node.name!r} is not bound")
        elif node.op != "const":
            node.value = _FORWARD[node.op]([p.value for p in node.parents], node.attrs)
    graph._evaluated = True
    return {name: check_finite(node.value, f"output {name!r}")
            for name, node in graph.outputs.items()}


def backward(graph: Graph, seed=1.0, output: str | Node | None = None) -> dict[str, Tensor]:
    """Reverse-mode gradients of one output with respect to every differentiable input."""
    if not graph._evaluated:
        raise GraphError("backward called before forward_eval")
    if isinstance(output, Node):
        root = output
    elif output is None:
        if len(graph.outputs) != 1:
            raise GraphError("graph has several outputs; name the one to differentiate")
        root = next(iter(graph.outputs.values()))
    else:
        root = graph.outputs[output]
    if root.value is None:
        raise GraphError("backward called before forward_eval")
    seed = as_tensor(seed)
    if seed.shape != root.shape:
        if seed.ndim == 0:
            seed = np.full(root.shape, float(seed))
        else:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {root.shape}")

    grads: dict[int, Tensor] = {root.index: seed}
    for node in reversed(graph.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or not node.parents:
            if g is not None and node.op == "input":
                grads[node.index] = g  # keep leaf gradients
            continue
        needs = [p.needs_grad for p in node.parents]
        if not any(needs):
            continue
        pgrads = _VJP[node.op](g, [p.value for p in node.parents], node.value, node.attrs, needs)
        for parent, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out = {}
    for name, node in graph.inputs.items():
        if not node.needs_grad:
            continue
        g = grads.get(node.index)
        out[name] = np.zeros(node.shape) if g is None else check_finite(
            np.asarray(g, dtype=np.float64), f"gradient of {name!r}")
    return out


def numerical_gradient(f: Callable[[Tensor], float], point, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_tensor(point).copy()
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"function is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gaussian_log_density(x, mean, log_var) -> float:
    """Log density of a diagonal Gaussian, summed over all entries."""
    x, mean, log_var = as_tensor(x), as_tensor(mean), as_tensor(log_var)
    if not (x.shape == mean.shape == log_var.shape):
        raise ShapeError(f"shape mismatch: {x.shape}, {mean.shape}, {log_var.shape}")
    return float(np.sum(-0.5 * LOG_2PI - 0.5 * log_var
                        - (x - mean) ** 2 / (2.0 * np.exp(log_var))))


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a, b = as_tensor(a), as_tensor(b)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale
