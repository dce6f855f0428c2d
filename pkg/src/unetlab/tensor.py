"""Dense float64 tensors, a splittable RNG, and the NNT1 binary format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in NCHW
layout.  The helpers here add the shape checks the rest of the package
relies on: no broadcasting except against scalars, explicit padding and
cropping, and channel concatenation that refuses spatial mismatches.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

DTYPE = np.float64
TENSOR_MAGIC = b"NNT1"


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


class AxisError(ShapeError):
    pass


class FormatError(ValueError):
    """Raised on malformed binary or text input."""


class Rng:
    """Counter-based random stream keyed by a seed and a path of stream ids.

    ``Rng(7).spawn("init")`` and ``Rng(7).spawn("shuffle", 3)`` are
    independent streams; both are fully determined by their key, so
    draws never depend on the order in which other streams were used.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for part in self.path:
            words.extend(_stream_words(part))
        key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, *ids) -> "Rng":
        return Rng(self.seed, self.path + tuple(ids))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=tuple(shape)).astype(DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"


def _stream_words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        v = int(part)
        return [1, v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF]
    data = str(part).encode("utf-8")
    return [2, len(data)] + list(data)


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: all extents must be >= 1")
    return shape


def create(shape: Sequence[int], fill: float = 0.0, *, rng: Rng | None = None,
           mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Make a new tensor.

    With ``rng`` given, elements are drawn from N(mean, std) in row-major
    order; otherwise every element equals ``fill``.
    """
    shape = _check_shape(shape)
    if rng is not None:
        return rng.normal(shape, mean, std)
    return np.full(shape, fill, dtype=DTYPE)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op, a, b=None) -> np.ndarray:
    """Apply ``op`` per element.

    ``op`` is one of ``"add"``, ``"sub"``, ``"mul"``, ``"max"`` or a unary
    callable.  Binary ops need equal shapes, or one side a scalar.
    """
    a = np.asarray(a, dtype=DTYPE)
    if callable(op):
        if b is not None:
            raise TypeError("unary map takes a single tensor")
        out = np.asarray(op(a), dtype=DTYPE)
        if out.shape != a.shape:
            raise ShapeError(f"unary map changed shape {a.shape} -> {out.shape}")
        return out
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return fn(a, b)


def reduce(op: str, a, axes=None, keepdims: bool = False) -> np.ndarray:
    """Sum or mean over ``axes`` (``None`` means all axes)."""
    a = np.asarray(a, dtype=DTYPE)
    if axes is not None:
        axes = tuple(sorted({int(ax) for ax in axes}))
        for ax in axes:
            if not -a.ndim <= ax < a.ndim:
                raise AxisError(f"axis {ax} out of range for rank {a.ndim}")
    if op == "sum":
        return np.sum(a, axis=axes, keepdims=keepdims)
    if op == "mean":
        return np.mean(a, axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def pad_crop(a, spec: Sequence[tuple[int, int]], mode: str = "pad") -> np.ndarray:
    """Zero-pad or crop each axis by ``(before, after)``."""
    a = np.asarray(a, dtype=DTYPE)
    if len(spec) != a.ndim:
        raise ShapeError(f"need {a.ndim} (before, after) pairs, got {len(spec)}")
    if any(b < 0 or e < 0 for b, e in spec):
        raise ShapeError("pad/crop amounts must be non-negative")
    if mode == "pad":
        return np.pad(a, [(int(b), int(e)) for b, e in spec])
    if mode == "crop":
        index = []
        for n, (b, e) in zip(a.shape, spec):
            if b + e >= n:
                raise ShapeError(f"cannot crop {b}+{e} from extent {n}")
            index.append(slice(b, n - e))
        return a[tuple(index)].copy()
    raise ValueError(f"unknown mode {mode!r}")


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate NCHW tensors along the channel axis, in order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    first = parts[0]
    for p in parts:
        if p.ndim != 4:
            raise ShapeError(f"concat_channels expects NCHW, got rank {p.ndim}")
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat_channels: {p.shape} incompatible with {first.shape}")
    if len(parts) == 1:
        return np.array(first, dtype=DTYPE)
    return np.concatenate(parts, axis=1)


# NNT1: magic, u32 rank, rank x u64 extents, f64 payload (all little-endian).

def write_tensor(f: BinaryIO, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    offset = f.tell() if f.seekable() else 0
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {offset}")
    rank = _unpack(f, "<I")[0]
    shape = _unpack(f, f"<{rank}Q")
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated tensor payload at byte {offset}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def _unpack(f: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise FormatError("unexpected end of file")
    return struct.unpack(fmt, raw)


def tensor_to_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, a)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
