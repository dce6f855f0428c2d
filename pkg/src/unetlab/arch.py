"""U-Net family builder: U-Net L^d, U-Net^e, UNet+ and UNet++.

All variants share one triangular address space of nodes ``X^{i,j}``
(level ``i``, skip position ``j``, ``i + j <= d``).  ``X^{i,0}`` is the
encoder; every ``j > 0`` node is a conv block over the concatenation of
some same-level predecessors and the up-sampled ``X^{i+1,j-1}``.  The
variants only differ in which same-level predecessors are used:

=========  ==========================================
unet_pp    ``X^{i,0}, ..., X^{i,j-1}`` (dense)
unet_plus  ``X^{i,j-1}`` (adjacent node)
unet_e     ``X^{i,0}`` (plain skip, one decoder per depth)
unet       ``X^{i,0}``, only nodes with ``i + j = d``
=========  ==========================================
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

from .autograd import Graph, GraphError
from .layers import (
    CONVS_PER_BLOCK,
    add_conv_block,
    add_downsample,
    add_head,
    add_upsample,
)
from .tensor import Rng

VARIANTS = ("unet", "unet_e", "unet_plus", "unet_pp")
DEFAULT_WIDTHS = (32, 64, 128, 256, 512)
WIDE_WIDTHS = (35, 70, 140, 280, 560)
IMAGE = "image"


class SpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def node_name(i: int, j: int) -> str:
    return f"X^{{{i},{j}}}"


def head_name(j: int) -> str:
    return f"head@{node_name(0, j)}"


def parse_node_name(name: str) -> tuple[int, int]:
    inner = name[name.index("{") + 1:name.index("}")]
    i, j = inner.split(",")
    return int(i), int(j)


@dataclass(frozen=True)
class ArchSpec:
    variant: str = "unet_pp"
    depth: int = 4
    widths: tuple = DEFAULT_WIDTHS
    classes: int = 1
    deep_supervision: bool = True
    input: tuple = (1, 96, 96)
    convs_per_block: int = CONVS_PER_BLOCK

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))

    def validate(self) -> "ArchSpec":
        if self.variant not in VARIANTS:
            raise SpecError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if not isinstance(self.depth, int) or self.depth < 1:
            raise SpecError("depth", f"must be an integer >= 1, got {self.depth!r}")
        if len(self.widths) != self.depth + 1:
            raise SpecError("widths", f"need depth+1 = {self.depth + 1} entries, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise SpecError("widths", "all widths must be >= 1")
        if self.classes < 1:
            raise SpecError("classes", "must be positive")
        if self.variant == "unet_e" and not self.deep_supervision:
            raise SpecError("deep_supervision", "unet_e cannot be trained without deep supervision")
        if len(self.input) != 3 or min(self.input) < 1:
            raise SpecError("input", f"expected (channels, height, width), got {self.input}")
        step = 2 ** self.depth
        if self.input[1] % step or self.input[2] % step:
            raise SpecError("input", f"height and width must be divisible by 2^depth = {step}")
        if self.convs_per_block < 1:
            raise SpecError("convs_per_block", "must be >= 1")
        return self

    def with_depth(self, depth: int, widths=None) -> "ArchSpec":
        widths = tuple(self.widths[:depth + 1]) if widths is None else tuple(widths)
        return replace(self, depth=depth, widths=widths)

    def to_text(self) -> str:
        lines = [
            f"variant={self.variant}",
            f"depth={self.depth}",
            "widths=" + ",".join(str(w) for w in self.widths),
            f"classes={self.classes}",
            f"deep_supervision={'true' if self.deep_supervision else 'false'}",
            "input=" + ",".join(str(v) for v in self.input),
            f"convs_per_block={self.convs_per_block}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ArchSpec":
        def ints(s):
            return tuple(int(v) for v in str(s).split(","))

        spec = cls(
            variant=kv["variant"],
            depth=int(kv["depth"]),
            widths=ints(kv["widths"]),
            classes=int(kv["classes"]),
            deep_supervision=str(kv["deep_supervision"]).lower() in ("1", "true", "yes"),
            input=ints(kv["input"]),
            convs_per_block=int(kv.get("convs_per_block", CONVS_PER_BLOCK)),
        )
        return spec

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        return cls.from_mapping(kv)


def node_addresses(variant: str, depth: int) -> list[tuple[int, int]]:
    """Architecture nodes in build order (column by column, deepest first)."""
    nodes = [(i, 0) for i in range(depth + 1)]
    for j in range(1, depth + 1):
        for i in range(depth - j, -1, -1):
            if variant == "unet" and i + j != depth:
                continue
            nodes.append((i, j))
    return nodes


def skip_inputs(variant: str, i: int, j: int) -> list[tuple[int, int]]:
    if variant == "unet_pp":
        return [(i, k) for k in range(j)]
    if variant == "unet_plus":
        return [(i, j - 1)]
    return [(i, 0)]


def head_columns(spec: ArchSpec) -> list[int]:
    if spec.deep_supervision and spec.variant != "unet":
        return list(range(1, spec.depth + 1))
    return [spec.depth]


def build(spec: ArchSpec, rng: Rng) -> Graph:
    """Construct the network for ``spec`` with He-normal weights from ``rng``."""
    spec.validate()
    w = spec.widths
    g = Graph()
    g.meta["spec"] = spec
    arch_inputs: dict[str, list[str]] = {}
    g.placeholder(IMAGE, (None, spec.input[0], None, None))
    for i, j in node_addresses(spec.variant, spec.depth):
        name = node_name(i, j)
        r = rng.spawn(name)
        if j == 0:
            if i == 0:
                src, ch, arch_inputs[name] = IMAGE, spec.input[0], []
            else:
                src = add_downsample(g, f"{name}/down", node_name(i - 1, 0), group=name)
                ch, arch_inputs[name] = w[i - 1], [node_name(i - 1, 0)]
        else:
            skips = [node_name(*a) for a in skip_inputs(spec.variant, i, j)]
            below = node_name(i + 1, j - 1)
            up = add_upsample(g, f"{name}/up", below, w[i + 1], w[i], r.spawn("up"), group=name)
            src = g.add(f"{name}/cat", "concat", skips + [up], group=name)
            ch = w[i] * (len(skips) + 1)
            arch_inputs[name] = skips + [below]
        add_conv_block(g, name, src, ch, w[i], r.spawn("block"), spec.convs_per_block)
    heads = []
    for j in head_columns(spec):
        h = add_head(g, head_name(j), node_name(0, j), w[0], spec.classes, rng.spawn(head_name(j)))
        g.set_output(h, h)
        heads.append(h)
    g.meta["arch_inputs"] = arch_inputs
    g.meta["heads"] = heads
    return g


def arch_nodes(graph: Graph) -> list[str]:
    return list(graph.meta["arch_inputs"])


def heads(graph: Graph) -> list[str]:
    return list(graph.meta["heads"])


def prune(graph: Graph, keep_depth: int) -> Graph:
    """Keep only what feeds the head at ``X^{0,keep_depth}``."""
    spec: ArchSpec = graph.meta["spec"]
    if not 1 <= keep_depth <= spec.depth:
        raise ValueError(f"keep_depth must lie in 1..{spec.depth}, got {keep_depth}")
    target = head_name(keep_depth)
    if target not in graph.meta["heads"]:
        raise GraphError(f"graph has no head at {node_name(0, keep_depth)}; prune needs deep supervision")
    pruned = graph.subgraph(graph.ancestors([target]))
    kept = {node.group for node in pruned.nodes.values()}
    pruned.meta["arch_inputs"] = {k: v for k, v in graph.meta["arch_inputs"].items() if k in kept}
    pruned.meta["heads"] = [target]
    pruned.meta["spec"] = spec.with_depth(keep_depth)
    pruned.meta["pruned_from"] = spec.depth
    return pruned


def param_count(graph: Graph) -> int:
    return int(sum(v.size for v in graph.params.values()))


def group_param_counts(graph: Graph) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, node in graph.nodes.items():
        if node.op == "parameter":
            counts[node.group] = counts.get(node.group, 0) + graph.params[name].size
    return counts


@dataclass
class SummaryRow:
    node: str
    op: str
    inputs: list
    out_shape: tuple
    params: int


@dataclass
class Summary:
    rows: list = field(default_factory=list)
    total_params: int = 0
    heads: list = field(default_factory=list)

    def text(self) -> str:
        header = ("node", "op", "inputs", "out_shape", "params")
        body = [(r.node, r.op, " ".join(r.inputs) or "-", "x".join(map(str, r.out_shape)), f"{r.params:,}")
                for r in self.rows]
        widths = [max(len(h), *(len(b[k]) for b in body)) for k, h in enumerate(header)]
        lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths))]
        lines += ["  ".join(c.ljust(wd) for c, wd in zip(b, widths)) for b in body]
        lines.append(f"total params: {self.total_params:,}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["node", "op", "inputs", "out_shape", "params"])
        for r in self.rows:
            writer.writerow([r.node, r.op, " ".join(r.inputs), "x".join(map(str, r.out_shape)), r.params])
        return buf.getvalue()


def summary(graph: Graph) -> Summary:
    spec: ArchSpec = graph.meta["spec"]
    counts = group_param_counts(graph)
    rows = []
    for name, inputs in graph.meta["arch_inputs"].items():
        i, j = parse_node_name(name)
        if j == 0:
            op = "H(image)" if i == 0 else "H(D(.))"
        else:
            op = f"H([{len(inputs) - 1} skip, U(.)])"
        shape = (1, spec.widths[i], spec.input[1] >> i, spec.input[2] >> i)
        rows.append(SummaryRow(name, op, list(inputs), shape, counts.get(name, 0)))
    for h in graph.meta["heads"]:
        src = h.split("@", 1)[1]
        rows.append(SummaryRow(h, "sigmoid(conv1x1)", [src], (1, spec.classes, spec.input[1], spec.input[2]),
                               counts.get(h, 0)))
    return Summary(rows, param_count(graph), list(graph.meta["heads"]))


def to_dot(graph: Graph, include_heads: bool = False) -> str:
    lines = ["digraph unet {", "  rankdir=TB;"]
    for name in graph.meta["arch_inputs"]:
        lines.append(f'  "{name}";')
    for name, inputs in graph.meta["arch_inputs"].items():
        for src in inputs:
            lines.append(f'  "{src}" -> "{name}";')
    if include_heads:
        for h in graph.meta["heads"]:
            lines.append(f'  "{h}" [shape=box];')
            lines.append(f'  "{h.split("@", 1)[1]}" -> "{h}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
