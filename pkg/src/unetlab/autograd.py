"""Static-graph reverse-mode automatic differentiation.

A :class:`Graph` is built once and evaluated many times.  Nodes are kept
in insertion order, which is also a valid topological order because a
node may only reference nodes that already exist.  Each node names an op
from the registry; ops supply a forward function and, when
differentiable, a vector-Jacobian product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import DTYPE, Rng, ShapeError, concat_channels


class GraphError(ValueError):
    pass


class FeedError(GraphError):
    pass


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    # backward(grad_out, inputs, out, **attrs) -> sequence of input grads (None = no gradient)
    backward: Callable | None = None
    # pattern(inputs, out) -> array identifying the active linear piece (relu masks, pool argmax)
    pattern: Callable | None = None


OPS: dict[str, Op] = {}


def register_op(name: str, forward: Callable, backward: Callable | None = None,
                pattern: Callable | None = None) -> Op:
    op = Op(name, forward, backward, pattern)
    OPS[name] = op
    return op


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    # Declared shape for placeholders; None entries are free.
    shape: tuple | None = None
    group: str | None = None


class Graph:
    """Computation DAG with named parameters and named outputs."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.params: dict[str, np.ndarray] = {}
        self.outputs: dict[str, str] = {}
        self.values: dict[str, np.ndarray] = {}
        self.meta: dict = {}

    # -- construction -----------------------------------------------------

    def _insert(self, node: Node) -> str:
        if node.name in self.nodes:
            raise GraphError(f"duplicate node name {node.name!r}")
        for inp in node.inputs:
            if inp not in self.nodes:
                raise GraphError(f"node {node.name!r} references unknown input {inp!r}")
        self.nodes[node.name] = node
        return node.name

    def placeholder(self, name: str, shape=None, group=None) -> str:
        return self._insert(Node(name, "placeholder", shape=None if shape is None else tuple(shape), group=group))

    def parameter(self, name: str, value, group=None) -> str:
        self.params[name] = np.array(value, dtype=DTYPE)
        return self._insert(Node(name, "parameter", shape=self.params[name].shape, group=group))

    def add(self, name: str, op: str, inputs, group=None, **attrs) -> str:
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        return self._insert(Node(name, op, tuple(inputs), attrs, group=group))

    def set_output(self, key: str, node: str) -> None:
        if node not in self.nodes:
            raise GraphError(f"unknown node {node!r}")
        self.outputs[key] = node

    # -- queries ------------------------------------------------------------

    @property
    def parameter_names(self) -> list[str]:
        return [n for n, node in self.nodes.items() if node.op == "parameter"]

    def ancestors(self, targets) -> set[str]:
        seen: set[str] = set()
        stack = list(targets)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.nodes[n].inputs)
        return seen

    def consumers(self, name: str) -> list[str]:
        return [n for n, node in self.nodes.items() if name in node.inputs]

    def subgraph(self, keep) -> "Graph":
        """Copy of the graph restricted to ``keep`` (must be input-closed)."""
        keep = set(keep)
        g = Graph()
        for name, node in self.nodes.items():
            if name not in keep:
                continue
            missing = [i for i in node.inputs if i not in keep]
            if missing:
                raise GraphError(f"node {name!r} needs dropped inputs {missing}")
            g.nodes[name] = Node(node.name, node.op, node.inputs, dict(node.attrs), node.shape, node.group)
            if node.op == "parameter":
                g.params[name] = self.params[name].copy()
        g.outputs = {k: v for k, v in self.outputs.items() if v in keep}
        g.meta = dict(self.meta)
        return g

    # -- evaluation -----------------------------------------------------------

    def forward(self, feeds: Mapping[str, np.ndarray], targets=None, store: dict | None = None) -> dict:
        """Evaluate the nodes needed for ``targets``.

        ``targets`` holds output keys or node names; by default every
        registered output whose inputs are fed.  Returns a mapping from
        each target to its value.  Values are kept in ``store`` (a fresh
        dict on ``self.values`` when omitted) for a following backward.
        """
        if targets is None:
            targets = [k for k, v in self.outputs.items()
                       if all(self.nodes[a].op != "placeholder" or a in feeds for a in self.ancestors([v]))]
        resolved = [self.outputs.get(t, t) for t in targets]
        for r in resolved:
            if r not in self.nodes:
                raise GraphError(f"unknown target {r!r}")
        needed = self.ancestors(resolved)
        values = {} if store is None else store
        if store is None:
            self.values = values
        values.clear()
        for name, node in self.nodes.items():
            if name not in needed:
                continue
            if node.op == "placeholder":
                if name not in feeds:
                    raise FeedError(f"placeholder {name!r} not fed")
                v = np.asarray(feeds[name], dtype=DTYPE)
                if node.shape is not None and (
                    v.ndim != len(node.shape)
                    or any(d is not None and d != s for d, s in zip(node.shape, v.shape))
                ):
                    raise ShapeError(f"feed {name!r} has shape {v.shape}, declared {node.shape}")
                values[name] = v
            elif node.op == "parameter":
                values[name] = self.params[name]
            else:
                args = [values[i] for i in node.inputs]
                try:
                    values[name] = OPS[node.op].forward(*args, **node.attrs)
                except ShapeError as exc:
                    raise ShapeError(f"at node {name!r} ({node.op}): {exc}") from exc
        return {t: values[r] for t, r in zip(targets, resolved)}

    def backward(self, loss: str, wrt=(), store: dict | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar node with respect to all parameters.

        Placeholder names in ``wrt`` get gradients too.  Requires a prior
        forward that computed ``loss``.
        """
        values = self.values if store is None else store
        loss = self.outputs.get(loss, loss)
        if loss not in values:
            raise GraphError(f"loss node {loss!r} has no value; run forward first")
        if values[loss].size != 1:
            raise GraphError(f"loss node {loss!r} is not scalar (shape {values[loss].shape})")
        sources = set(self.parameter_names) | set(wrt)
        live = self._requires_grad(sources)
        grads: dict[str, np.ndarray] = {loss: np.ones_like(values[loss])}
        order = [n for n in self.nodes if n in values]
        for name in reversed(order):
            g = grads.get(name)
            node = self.nodes[name]
            if g is None or node.op in ("placeholder", "parameter"):
                continue
            op = OPS[node.op]
            if op.backward is None:
                continue
            args = [values[i] for i in node.inputs]
            in_grads = op.backward(g, args, values[name], **node.attrs)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or inp not in live:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = gi
        out = {}
        for name in sorted(sources):
            if name in grads:
                out[name] = grads[name]
            elif name in self.params:
                out[name] = np.zeros_like(self.params[name])
            elif name in values:
                out[name] = np.zeros_like(values[name])
        return out

    def _requires_grad(self, sources) -> set[str]:
        live = set()
        for name, node in self.nodes.items():
            if name in sources or any(i in live for i in node.inputs):
                live.add(name)
        return live


# -- core ops ---------------------------------------------------------------

def _same_shape(a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _add(a, b):
    _same_shape(a, b)
    return a + b


def _sub(a, b):
    _same_shape(a, b)
    return a - b


def _mul(a, b):
    _same_shape(a, b)
    return a * b


register_op("add", _add, lambda g, x, y: (_unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)))
register_op("sub", _sub, lambda g, x, y: (_unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)))
register_op("mul", _mul, lambda g, x, y: (_unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)))
register_op("scale", lambda a, k=1.0: a * k, lambda g, x, y, k=1.0: (g * k,))


def _add_n(*xs):
    out = xs[0]
    for x in xs[1:]:
        _same_shape(out, x)
        out = out + x
    return out


register_op("add_n", _add_n, lambda g, x, y: tuple(g for _ in x))


def _weighted_sum(*xs, weights=()):
    out = np.zeros_like(xs[0])
    for w, x in zip(weights, xs):
        out = out + w * x
    return out


register_op("weighted_sum", _weighted_sum,
            lambda g, x, y, weights=(): tuple(w * g for w in weights))
register_op("sum", lambda a: np.sum(a).reshape(1),
            lambda g, x, y: (np.full_like(x[0], g.reshape(()),),))
register_op("mean", lambda a: np.mean(a).reshape(1),
            lambda g, x, y: (np.full_like(x[0], g.reshape(()) / x[0].size),))


def _relu_bwd(g, x, y):
    # derivative at exactly 0 is taken as 0
    return (g * (x[0] > 0),)


register_op("relu", lambda a: np.maximum(a, 0.0), _relu_bwd, lambda ins, out: ins[0] > 0)


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


register_op("sigmoid", sigmoid, lambda g, x, y: (g * y * (1.0 - y),))


def _concat(*parts):
    return concat_channels(parts)


def _concat_bwd(g, x, y):
    out, start = [], 0
    for part in x:
        c = part.shape[1]
        out.append(g[:, start:start + c])
        start += c
    return tuple(out)


register_op("concat", _concat, _concat_bwd)


# -- gradient verification -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple | None = None
    failures: list = field(default_factory=list)
    one_sided: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.1e} "
                f"coords={self.checked} one_sided={self.one_sided} skipped={self.skipped} worst={self.worst}")


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    if scale < floor:
        return diff
    return diff / scale


def activation_pattern(graph: Graph, store: dict | None = None) -> list:
    """Which linear piece every piecewise-linear op sits on after a forward."""
    values = graph.values if store is None else store
    out = []
    for name, node in graph.nodes.items():
        op = OPS.get(node.op)
        if op is None or op.pattern is None or name not in values:
            continue
        out.append(op.pattern([values[i] for i in node.inputs], values[name]))
    return out


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(graph: Graph, loss: str, feeds: Mapping[str, np.ndarray], rng: Rng,
                      tolerance: float, eps: float = 1e-5, max_coords: int = 200,
                      wrt=()) -> GradCheckReport:
    """Compare backward() against finite differences on sampled coordinates.

    Up to ``max_coords`` coordinates are drawn without replacement from all
    parameters (and from the placeholders listed in ``wrt``).  The central
    difference is used unless a +-eps step moves a rectifier or max-pool
    onto another linear piece; then the one-sided difference on the side
    that stays on the current piece is used, and a coordinate whose both
    sides switch is skipped and counted.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    feeds = {k: np.array(v, dtype=DTYPE) for k, v in feeds.items()}
    base = float(graph.forward(feeds, targets=[loss])[loss].reshape(()))
    base_pattern = activation_pattern(graph)
    analytic = graph.backward(loss, wrt=wrt)

    tensors = {name: graph.params[name] for name in graph.parameter_names}
    for name in wrt:
        tensors[name] = feeds[name]
    coords = [(name, idx) for name in sorted(tensors) for idx in range(tensors[name].size)]
    if len(coords) > max_coords:
        picks = sorted(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picks]

    def probe(flat, idx, value):
        flat[idx] = value
        out = float(graph.forward(feeds, targets=[loss])[loss].reshape(()))
        return out, _same_pattern(activation_pattern(graph), base_pattern)

    report = GradCheckReport(0.0, tolerance, 0)
    for name, idx in coords:
        flat = tensors[name].reshape(-1)
        orig = flat[idx]
        up, up_ok = probe(flat, idx, orig + eps)
        down, down_ok = probe(flat, idx, orig - eps)
        flat[idx] = orig
        if up_ok and down_ok:
            numeric = (up - down) / (2 * eps)
        elif up_ok or down_ok:
            numeric = (up - base) / eps if up_ok else (base - down) / eps
            report.one_sided += 1
        else:
            report.skipped += 1
            continue
        exact = float(analytic[name].reshape(-1)[idx])
        err = relative_error(exact, numeric)
        report.checked += 1
        if err >= tolerance:
            report.failures.append((name, idx, exact, numeric, err))
        if report.worst is None or err > report.max_rel_error:
            report.max_rel_error, report.worst = err, (name, idx)
    graph.forward(feeds, targets=[loss])
    return report
