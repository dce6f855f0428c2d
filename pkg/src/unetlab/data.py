"""Synthetic blob segmentation data, PGM/manifest persistence and patching."""
from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import DTYPE, FormatError, Rng, ShapeError

SPLITS = ("train", "val", "test")
N_BUCKETS = 7
MAXVAL = 65535


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    count: int = 200
    size: tuple = (64, 64)
    blobs: tuple = (1, 3)
    radius: tuple = (3.0, 14.0)
    deformation: float = 0.25
    noise: float = 0.05
    multiscale: bool = True
    background: float = 0.15
    foreground: tuple = (0.6, 0.9)
    classes: int = 1
    split_ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 7

    def validate(self) -> "SynthConfig":
        h, w = self.size
        if self.count < 3:
            raise GenerationError("count must be >= 3 (one sample per split)")
        lo, hi = self.radius
        if lo < 1 or hi < lo or hi >= min(h, w) / 2:
            raise GenerationError(f"radius range {self.radius} must satisfy 1 <= lo <= hi < min(H, W)/2")
        if self.blobs[0] < 1 or self.blobs[1] < self.blobs[0]:
            raise GenerationError(f"invalid blob count range {self.blobs}")
        # smallest possible blobs must still leave background visible
        if self.blobs[1] * np.pi * lo * lo * (1 - self.deformation) ** 2 > 0.6 * h * w:
            raise GenerationError(f"{self.blobs[1]} blobs of radius >= {lo} do not fit in {h}x{w}")
        if not 0 <= self.deformation < 0.5:
            raise GenerationError("deformation must lie in [0, 0.5)")
        if self.classes < 1:
            raise GenerationError("classes must be >= 1")
        return self


@dataclass
class Sample:
    image: np.ndarray   # [1, H, W] in [0, 1]
    mask: np.ndarray    # [C, H, W] in {0, 1}
    id: str
    split: str
    size_bucket: int = 0
    parent: str | None = None
    offset: tuple | None = None


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ([N, 1, H, W] images, [N, C, H, W] masks) of one split."""
        items = self.split(name)
        if not items:
            raise ValueError(f"split {name!r} is empty")
        return np.stack([s.image for s in items]), np.stack([s.mask for s in items])

    def ids(self, name: str | None = None) -> list[str]:
        return [s.id for s in self.samples if name is None or s.split == name]


# -- generation ------------------------------------------------------------

def _blob_mask(h, w, cy, cx, r, aspect, angle, harmonics, amp):
    yy, xx = np.mgrid[0:h, 0:w].astype(DTYPE)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / (r * aspect)
    v = (-s * dx + c * dy) / (r / aspect)
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = np.ones_like(phi)
    for k, (a, ph) in enumerate(harmonics, start=2):
        boundary += amp * a * np.cos(k * phi + ph)
    return rho <= boundary


def _draw_blob(rng: Rng, cfg: SynthConfig):
    h, w = cfg.size
    lo, hi = cfg.radius
    if cfg.multiscale:
        r = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    else:
        r = float(rng.uniform(lo, hi))
    aspect = float(np.sqrt(rng.uniform(0.7, 1.4)))
    extent = r * max(aspect, 1 / aspect) * (1 + cfg.deformation)
    margin = min(extent, min(h, w) / 2 - 1)
    cy = float(rng.uniform(margin, h - margin))
    cx = float(rng.uniform(margin, w - margin))
    angle = float(rng.uniform(0, np.pi))
    raw = rng.uniform(-1, 1, size=3) / np.arange(2, 5)
    raw = raw / max(1.0, np.abs(raw).sum())
    phases = rng.uniform(0, 2 * np.pi, size=3)
    level = float(rng.uniform(*cfg.foreground))
    mask = _blob_mask(h, w, cy, cx, r, aspect, angle, list(zip(raw, phases)), cfg.deformation)
    if not mask.any():
        # sub-pixel blob: light up the centre pixel so every blob is visible
        mask[min(int(cy), h - 1), min(int(cx), w - 1)] = True
    return mask, level


def assign_splits(ids, ratios=(0.6, 0.2, 0.2)) -> dict[str, str]:
    """Deterministic split by id hash, every split non-empty for >= 3 ids."""
    order = sorted(ids, key=lambda s: hashlib.sha256(s.encode("utf-8")).hexdigest())
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    out = {}
    for k, sid in enumerate(order):
        out[sid] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return out


def area_buckets(areas, n_buckets: int = N_BUCKETS) -> list[int]:
    """Quantile buckets by rank; ties broken by position."""
    order = np.argsort(np.asarray(areas), kind="stable")
    buckets = np.empty(len(order), dtype=int)
    buckets[order] = (np.arange(len(order)) * n_buckets) // len(order)
    return buckets.tolist()


def gen_synthetic(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Dark background with bright deformed-ellipse blobs plus Gaussian noise."""
    cfg.validate()
    h, w = cfg.size
    root = Rng(cfg.seed)
    samples = []
    for n in range(cfg.count):
        rng = root.spawn("sample", n)
        image = np.full((h, w), cfg.background, dtype=DTYPE)
        mask = np.zeros((cfg.classes, h, w), dtype=DTYPE)
        for _ in range(int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1))):
            blob, level = _draw_blob(rng, cfg)
            cls = int(rng.integers(0, cfg.classes))
            image[blob] = np.maximum(image[blob], level)
            mask[cls][blob] = 1.0
        if cfg.noise > 0:
            image = np.clip(image + rng.normal((h, w), 0.0, cfg.noise), 0.0, 1.0)
        samples.append(Sample(image[None], mask, f"img{n:05d}", ""))
    splits = assign_splits([s.id for s in samples], cfg.split_ratios)
    buckets = area_buckets([s.mask.sum() for s in samples])
    for s, b in zip(samples, buckets):
        s.split = splits[s.id]
        s.size_bucket = b
    return Dataset(samples)


# -- PGM -------------------------------------------------------------------------

def write_pgm(path, samples: np.ndarray, maxval: int = MAXVAL) -> None:
    """Binary P5 graymap; 16-bit samples are big-endian."""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D array, got shape {samples.shape}")
    h, w = samples.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    _atomic_write(path, header + samples.astype(dtype).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (samples as uint16 [H, W], maxval)."""
    data = Path(path).read_bytes()
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end()
    magic, at = tokens[0]
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5 magic at byte {at}, found {magic!r}")
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"{path}: bad header field {tok!r} at byte {at}")
        values.append(int(tok))
    w, h, maxval = values
    if w < 1 or h < 1 or not 0 < maxval <= MAXVAL:
        raise FormatError(f"{path}: invalid dimensions or maxval at byte {tokens[1][1]}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    width = 2 if maxval > 255 else 1
    need = w * h * width
    if len(data) - pos < need:
        raise FormatError(f"{path}: raster needs {need} bytes from byte {pos}, file has {len(data) - pos}")
    raster = np.frombuffer(data, dtype=">u2" if width == 2 else "u1", count=w * h, offset=pos)
    if np.any(raster > maxval):
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return raster.reshape(h, w).astype(np.uint16), maxval


def load_pgm_float(path) -> np.ndarray:
    raster, maxval = read_pgm(path)
    return raster.astype(DTYPE) / maxval


def quantize(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * MAXVAL).astype(np.uint16)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("id", "image_path", "mask_path", "split", "size_bucket")


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for s in ds:
        img_rel = f"images/{s.id}.pgm"
        write_pgm(directory / img_rel, quantize(s.image[0]))
        mask_rels = []
        for c in range(s.mask.shape[0]):
            rel = f"masks/{s.id}_c{c}.pgm"
            write_pgm(directory / rel, (s.mask[c] > 0.5).astype(np.uint16) * MAXVAL)
            mask_rels.append(rel)
        lines.append("\t".join([s.id, img_rel, ";".join(mask_rels), s.split, str(s.size_bucket)]))
    _atomic_write(directory / MANIFEST, ("\n".join(lines) + "\n").encode("utf-8"))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"{path}: manifest not found") from None
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise FormatError(f"{path}:1: header must list columns {', '.join(MANIFEST_COLUMNS)}")
    samples, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        sid, img_rel, mask_rels, split, bucket = cols
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
        if sid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {sid!r}")
        try:
            bucket = int(bucket)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: size_bucket {bucket!r} is not an integer") from None
        seen.add(sid)
        image = load_pgm_float(directory / img_rel)[None]
        masks = []
        for rel in mask_rels.split(";"):
            raster, maxval = read_pgm(directory / rel)
            if np.any((raster != 0) & (raster != maxval)):
                raise FormatError(f"{directory / rel}: mask samples must be 0 or maxval")
            masks.append((raster == maxval).astype(DTYPE))
        mask = np.stack(masks)
        if mask.shape[1:] != image.shape[1:]:
            raise FormatError(f"{path}:{lineno}: mask and image sizes differ")
        samples.append(Sample(image, mask, sid, split, bucket))
    return Dataset(samples)


# -- patches ------------------------------------------------------------------------

def tile_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window is clamped to the border."""
    if patch > extent:
        raise ShapeError(f"patch {patch} larger than extent {extent}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


def extract_patches(ds: Dataset, patch, stride) -> Dataset:
    ph, pw = patch
    sh, sw = stride
    out = []
    for s in ds:
        _, h, w = s.image.shape
        for y in tile_origins(h, ph, sh):
            for x in tile_origins(w, pw, sw):
                out.append(replace(
                    s,
                    image=s.image[:, y:y + ph, x:x + pw].copy(),
                    mask=s.mask[:, y:y + ph, x:x + pw].copy(),
                    id=f"{s.id}@{y},{x}",
                    parent=s.id,
                    offset=(y, x),
                ))
    return Dataset(out)
