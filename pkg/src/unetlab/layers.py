"""Convolution block H, down-sampler D, up-sampler U and the sigmoid head.

Each primitive is a pure numpy function plus a registered autograd op.
The ``add_*`` helpers wire a primitive (with its parameters) into a
:class:`~unetlab.autograd.Graph` under a common name prefix, so the
parameters of node ``X^{1,2}`` are ``X^{1,2}/conv0/kernel`` and so on.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Graph, register_op, sigmoid
from .tensor import DTYPE, Rng, ShapeError

CONVS_PER_BLOCK = 2


def _check_conv(x, kernel, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel [out, in, k, k], got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")


def _windows(x, k):
    """(N, C, H, W, k, k) view of a zero-padded input for 'same' convolution."""
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d(x, kernel, bias):
    """Stride-1 'same' convolution (cross-correlation) of an NCHW tensor."""
    _check_conv(x, kernel, bias)
    k = kernel.shape[2]
    if k == 1:
        out = np.tensordot(kernel[:, :, 0, 0], x, axes=([1], [1]))  # (O, N, H, W)
    else:
        cols = _windows(x, k)
        out = np.tensordot(kernel, cols, axes=([1, 2, 3], [1, 4, 5]))  # (O, N, H, W)
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(g, x, kernel):
    k = kernel.shape[2]
    if k == 1:
        w = kernel[:, :, 0, 0]
        gk = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        gx = np.tensordot(w, g, axes=([0], [1])).transpose(1, 0, 2, 3)
    else:
        cols = _windows(x, k)
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
        flipped = kernel[:, :, ::-1, ::-1]
        gcols = _windows(g, k)
        gx = np.tensordot(flipped, gcols, axes=([0, 2, 3], [1, 4, 5])).transpose(1, 0, 2, 3)
    gb = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gk, gb


register_op("conv2d", conv2d, lambda g, ins, out: conv2d_backward(g, ins[0], ins[1]))


def relu(x):
    return np.maximum(x, 0.0)


def downsample(x):
    """2x2 max-pool with stride 2."""
    if x.ndim != 4:
        raise ShapeError(f"downsample expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even spatial extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def _pool_argmax(x):
    """Index (row-major within each 2x2 window) of the first maximum."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return win.argmax(axis=-1)


def downsample_backward(g, x):
    n, c, h, w = x.shape
    # ties go to the first maximum
    first = _pool_argmax(x)
    mask = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
    gx = mask * g[..., None]
    return gx.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _pool_pattern(ins, out):
    return _pool_argmax(ins[0])


register_op("maxpool2", downsample, lambda g, ins, out: (downsample_backward(g, ins[0]),), _pool_pattern)


def upsample(x, kernel, bias):
    """Transposed convolution, 2x2 kernel, stride 2; kernel is [in, out, 2, 2]."""
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got shape {x.shape}")
    if kernel.shape[0] != x.shape[1] or kernel.shape[2:] != (2, 2):
        raise ShapeError(f"upsample: kernel {kernel.shape} does not fit input {x.shape}")
    n, _, h, w = x.shape
    o = kernel.shape[1]
    out = np.tensordot(x, kernel, axes=([1], [0]))  # (N, H, W, O, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * w)
    return out + bias[None, :, None, None]


def upsample_backward(g, x, kernel):
    n, c, h, w = x.shape
    o = kernel.shape[1]
    g6 = g.reshape(n, o, h, 2, w, 2)
    gx = np.tensordot(g6, kernel, axes=([1, 3, 5], [1, 2, 3]))  # (N, H, W, C)
    gk = np.tensordot(x, g6, axes=([0, 2, 3], [0, 2, 4]))  # (C, O, 2, 2)
    gb = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gk, gb


register_op("upconv2", upsample, lambda g, ins, out: upsample_backward(g, ins[0], ins[1]))


def conv_block(x, params, k=CONVS_PER_BLOCK):
    """H: ``k`` repetitions of conv2d followed by a rectifier.

    ``params`` is a sequence of ``(kernel, bias)`` pairs.
    """
    for kernel, bias in params[:k]:
        x = relu(conv2d(x, kernel, bias))
    return x


def head(x, kernel, bias):
    """1x1 convolution to C channels followed by a sigmoid."""
    return sigmoid(conv2d(x, kernel, bias))


# -- initialisation -----------------------------------------------------------

def he_normal(shape, fan_in, rng: Rng):
    return rng.normal(shape, 0.0, np.sqrt(2.0 / fan_in))


def conv_params(in_ch, out_ch, k, rng: Rng):
    kernel = he_normal((out_ch, in_ch, k, k), in_ch * k * k, rng)
    return kernel, np.zeros(out_ch, dtype=DTYPE)


def upsample_params(in_ch, out_ch, rng: Rng):
    kernel = he_normal((in_ch, out_ch, 2, 2), in_ch * 4, rng)
    return kernel, np.zeros(out_ch, dtype=DTYPE)


# -- graph builders -------------------------------------------------------------

def add_conv(g: Graph, prefix: str, x: str, in_ch: int, out_ch: int, k: int, rng: Rng, group=None) -> str:
    kernel, bias = conv_params(in_ch, out_ch, k, rng)
    kn = g.parameter(f"{prefix}/kernel", kernel, group=group)
    bn = g.parameter(f"{prefix}/bias", bias, group=group)
    return g.add(prefix, "conv2d", [x, kn, bn], group=group)


def add_conv_block(g: Graph, name: str, x: str, in_ch: int, out_ch: int, rng: Rng,
                   convs: int = CONVS_PER_BLOCK) -> str:
    """Append H to the graph; the block's final activation is named ``name``."""
    h, ch = x, in_ch
    for layer in range(convs):
        h = add_conv(g, f"{name}/conv{layer}", h, ch, out_ch, 3, rng, group=name)
        ch = out_ch
        act = name if layer == convs - 1 else f"{name}/relu{layer}"
        h = g.add(act, "relu", [h], group=name)
    return h


def add_downsample(g: Graph, name: str, x: str, group=None) -> str:
    return g.add(name, "maxpool2", [x], group=group)


def add_upsample(g: Graph, name: str, x: str, in_ch: int, out_ch: int, rng: Rng, group=None) -> str:
    kernel, bias = upsample_params(in_ch, out_ch, rng)
    kn = g.parameter(f"{name}/kernel", kernel, group=group)
    bn = g.parameter(f"{name}/bias", bias, group=group)
    return g.add(name, "upconv2", [x, kn, bn], group=group)


def add_head(g: Graph, name: str, x: str, in_ch: int, classes: int, rng: Rng) -> str:
    logits = add_conv(g, f"{name}/conv", x, in_ch, classes, 1, rng, group=name)
    return g.add(name, "sigmoid", [logits], group=name)
