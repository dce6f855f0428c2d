"""Finite-difference checks for each layer op and for whole networks."""
from __future__ import annotations

import numpy as np

from . import arch
from .autograd import Graph, finite_diff_check
from .layers import add_conv, add_conv_block, add_downsample, add_head, add_upsample
from .losses import LABEL, LOSS, LossConfig, add_total_loss
from .tensor import Rng

OP_CHECKS = ("conv2d", "conv1x1", "conv_block", "downsample", "upsample", "head", "concat", "hybrid_loss")


def _probe_loss(g: Graph, out: str, shape, rng: Rng) -> dict:
    """loss = sum(out * r) for a fixed random r, so every output element matters."""
    g.placeholder("r", shape)
    g.add("weighted", "mul", [out, "r"])
    g.add(LOSS, "sum", ["weighted"])
    return {"r": rng.normal(shape)}


def op_graph(op: str, rng: Rng) -> tuple[Graph, dict, tuple]:
    """(graph with scalar node ``loss``, feeds, placeholders to differentiate)."""
    g = Graph()
    n, c, h, w = 2, 3, 6, 6
    x = g.placeholder("x", (n, c, h, w))
    feeds = {"x": rng.spawn("x").normal((n, c, h, w))}
    if op == "conv2d":
        out, shape = add_conv(g, "conv", x, c, 4, 3, rng.spawn("p")), (n, 4, h, w)
        g.params["conv/bias"] += rng.spawn("b").normal((4,))
    elif op == "conv1x1":
        out, shape = add_conv(g, "conv", x, c, 4, 1, rng.spawn("p")), (n, 4, h, w)
        g.params["conv/bias"] += rng.spawn("b").normal((4,))
    elif op == "conv_block":
        out, shape = add_conv_block(g, "block", x, c, 4, rng.spawn("p")), (n, 4, h, w)
    elif op == "downsample":
        out, shape = add_downsample(g, "down", x), (n, c, h // 2, w // 2)
    elif op == "upsample":
        out, shape = add_upsample(g, "up", x, c, 2, rng.spawn("p")), (n, 2, 2 * h, 2 * w)
        g.params["up/bias"] += rng.spawn("b").normal((2,))
    elif op == "head":
        out, shape = add_head(g, "head", x, c, 2, rng.spawn("p")), (n, 2, h, w)
    elif op == "concat":
        g.placeholder("x2", (n, 2, h, w))
        feeds["x2"] = rng.spawn("x2").normal((n, 2, h, w))
        out, shape = g.add("cat", "concat", ["x", "x2"]), (n, c + 2, h, w)
        feeds.update(_probe_loss(g, out, shape, rng.spawn("r")))
        return g, feeds, ("x", "x2")
    elif op == "hybrid_loss":
        g = Graph()
        g.placeholder("p", (n, 2, h, w))
        g.placeholder(LABEL, (n, 2, h, w))
        # keep p away from the log clamp
        feeds = {"p": rng.spawn("p").uniform(0.05, 0.95, size=(n, 2, h, w)),
                 LABEL: (rng.spawn("y").uniform(size=(n, 2, h, w)) > 0.5).astype(float)}
        g.add("plain", "hybrid_loss", [LABEL, "p"], eps_log=1e-12, eps_dice=1e-12, full_bce=False)
        g.add("bce", "hybrid_loss", [LABEL, "p"], eps_log=1e-12, eps_dice=1e-12, full_bce=True)
        g.add(LOSS, "add", ["plain", "bce"])
        return g, feeds, ("p",)
    else:
        raise ValueError(f"unknown op check {op!r}; choose from {OP_CHECKS}")
    feeds.update(_probe_loss(g, out, shape, rng.spawn("r")))
    return g, feeds, ("x",)


def check_op(op: str, seed: int = 0, tolerance: float = 1e-4):
    g, feeds, wrt = op_graph(op, Rng(seed).spawn("gradcheck", op))
    return finite_diff_check(g, LOSS, feeds, Rng(seed).spawn("coords", op), tolerance, wrt=wrt)


def net_graph(spec: arch.ArchSpec, seed: int, loss_cfg: LossConfig = LossConfig()):
    rng = Rng(seed)
    g = arch.build(spec, rng.spawn("init"))
    add_total_loss(g, arch.heads(g), loss_cfg)
    shape = (1, spec.input[0], spec.input[1], spec.input[2])
    label_shape = (1, spec.classes, spec.input[1], spec.input[2])
    feeds = {arch.IMAGE: rng.spawn("image").normal(shape),
             LABEL: (rng.spawn("label").uniform(size=label_shape) > 0.5).astype(float)}
    return g, feeds


def check_net(spec: arch.ArchSpec, seed: int = 0, tolerance: float = 1e-4,
              loss_cfg: LossConfig = LossConfig(full_bce=True)):
    g, feeds = net_graph(spec, seed, loss_cfg)
    return finite_diff_check(g, LOSS, feeds, Rng(seed).spawn("coords"), tolerance)
