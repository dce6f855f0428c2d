"""Training (Adam + early stopping), checkpoints and inference modes."""
from __future__ import annotations

import csv
import io
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import arch
from .arch import ArchSpec
from .autograd import Graph
from .data import Dataset, tile_origins
from .losses import LABEL, LOSS, LossConfig, add_total_loss, segmentation_metrics
from .tensor import DTYPE, FormatError, Rng, ShapeError, read_tensor, write_tensor


class TrainingError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 30
    patience: int = 5
    seed: int = 7
    # the y*log(p)-only loss is minimised by p == 1 everywhere, so training adds (1-y)*log(1-p)
    loss: LossConfig = LossConfig(full_bce=True)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# -- Adam ---------------------------------------------------------------------

def adam_step(theta, grad, m, v, t, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (theta, m, v)."""
    if not theta.shape == grad.shape == m.shape == v.shape:
        raise ShapeError(f"adam_step shapes differ: {theta.shape}, {grad.shape}, {m.shape}, {v.shape}")
    if t < 1:
        raise ValueError("step counter t starts at 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c = self.cfg
        for name in sorted(params):
            new, self.m[name], self.v[name] = adam_step(
                params[name], grads[name], self.m[name], self.v[name], self.t,
                c.learning_rate, c.beta1, c.beta2, c.adam_eps)
            params[name][...] = new


# -- history ------------------------------------------------------------------------

@dataclass
class TrainHistory:
    heads: list
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def columns(self) -> list[str]:
        return ["epoch", "train_loss", "val_loss"] + [f"val_loss@{h}" for h in self.heads] + ["val_iou"]

    def as_array(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, len(self.columns)))
        return np.array([[r[c] for c in self.columns] for r in self.rows], dtype=DTYPE)

    @classmethod
    def from_array(cls, heads, table, best_epoch=-1, stop_reason=""):
        h = cls(list(heads), best_epoch=best_epoch, stop_reason=stop_reason)
        for row in np.asarray(table):
            rec = dict(zip(h.columns, (float(v) for v in row)))
            rec["epoch"] = int(rec["epoch"])
            h.rows.append(rec)
        return h

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([str(r["epoch"]) if c == "epoch" else repr(float(r[c])) for c in self.columns])
        return buf.getvalue()


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NNCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ArchSpec
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    seed: int = 0
    state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def header_text(self) -> str:
        lines = [self.spec.to_text().rstrip("\n"),
                 f"state.step={self.step}", f"state.epoch={self.epoch}", f"state.seed={self.seed}"]
        for k in sorted(self.state):
            lines.append(f"state.{k}={self.state[k]}")
        return "\n".join(lines) + "\n"

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(k, self.params[k]) for k in sorted(self.params)]
        out += [(f"adam.m/{k}", self.m[k]) for k in sorted(self.m)]
        out += [(f"adam.v/{k}", self.v[k]) for k in sorted(self.v)]
        out += [(f"extra/{k}", self.extra[k]) for k in sorted(self.extra)]
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        text = self.header_text().encode("utf-8")
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        tensors = self.tensors()
        buf.write(struct.pack("<I", len(tensors)))
        for name, value in tensors:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            write_tensor(buf, value)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        f = io.BytesIO(data)

        def take(n):
            raw = f.read(n)
            if len(raw) != n:
                raise FormatError(f"truncated checkpoint at byte {f.tell()}")
            return raw

        if take(4) != CHECKPOINT_MAGIC:
            raise FormatError("not a checkpoint (bad magic at byte 0)")
        version = struct.unpack("<I", take(4))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        text = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
        kv = {}
        for line in text.splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        spec = ArchSpec.from_mapping({k: v for k, v in kv.items() if not k.startswith("state.")})
        state = {k[6:]: v for k, v in kv.items() if k.startswith("state.")}
        ck = cls(spec, {}, step=int(state.pop("step", 0)), epoch=int(state.pop("epoch", 0)),
                 seed=int(state.pop("seed", 0)), state=state)
        count = struct.unpack("<I", take(4))[0]
        for _ in range(count):
            name = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
            value = read_tensor(f)
            for prefix, target in (("adam.m/", ck.m), ("adam.v/", ck.v), ("extra/", ck.extra)):
                if name.startswith(prefix):
                    target[name[len(prefix):]] = value
                    break
            else:
                ck.params[name] = value
        return ck

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def model_from_checkpoint(ck: Checkpoint) -> Graph:
    """Rebuild the network and load the checkpoint's parameters into it."""
    g = arch.build(ck.spec, Rng(0))
    if set(g.params) != set(ck.params):
        missing = sorted(set(g.params) ^ set(ck.params))[:3]
        raise CompatibilityError(f"checkpoint parameters do not match spec (e.g. {missing})")
    for name, value in ck.params.items():
        if g.params[name].shape != value.shape:
            raise CompatibilityError(f"parameter {name!r}: checkpoint {value.shape} vs spec {g.params[name].shape}")
        g.params[name] = np.array(value, dtype=DTYPE)
    return g


# -- training ----------------------------------------------------------------------------

def _batches(n, size, order):
    return [order[k:k + size] for k in range(0, n, size)]


class Trainer:
    """Stateful training run; ``checkpoint()`` captures everything needed to resume."""

    def __init__(self, spec: ArchSpec, data: Dataset, cfg: TrainConfig, resume: Checkpoint | None = None):
        spec.validate()
        self.spec, self.cfg = spec, cfg
        for split in ("train", "val"):
            if not data.split(split):
                raise DataError(f"dataset has an empty {split} split")
        self.x_train, self.y_train = data.arrays("train")
        self.x_val, self.y_val = data.arrays("val")
        if self.x_train.shape[1:] != spec.input:
            raise DataError(f"images are {self.x_train.shape[1:]}, spec input is {spec.input}")
        if self.y_train.shape[1] != spec.classes:
            raise DataError(f"masks have {self.y_train.shape[1]} classes, spec has {spec.classes}")
        self.graph = arch.build(spec, Rng(cfg.seed).spawn("init"))
        self.heads = arch.heads(self.graph)
        add_total_loss(self.graph, self.heads, cfg.loss)
        self.adam = Adam(self.graph.params, cfg)
        self.epoch = 0
        self.history = TrainHistory(self.heads)
        self.best_val = np.inf
        self.bad_epochs = 0
        self.best = self._snapshot()
        if resume is not None:
            self._restore(resume)

    # state capture ---------------------------------------------------------

    def _snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.graph.params.items()},
            "m": {k: v.copy() for k, v in self.adam.m.items()},
            "v": {k: v.copy() for k, v in self.adam.v.items()},
            "step": self.adam.t,
            "epoch": self.epoch,
        }

    def checkpoint(self) -> Checkpoint:
        """Resumable state at the end of the last completed epoch."""
        extra = {"history": self.history.as_array()}
        for key in ("params", "m", "v"):
            for k, v in self.best[key].items():
                extra[f"best.{key}/{k}"] = v
        state = {
            "best_val": repr(float(self.best_val)),
            "bad_epochs": self.bad_epochs,
            "best_epoch": self.history.best_epoch,
            "best_step": self.best["step"],
            "stop_reason": self.history.stop_reason,
        }
        snap = self._snapshot()
        return Checkpoint(self.spec, snap["params"], snap["m"], snap["v"], snap["step"], self.epoch,
                          self.cfg.seed, state, extra)

    def best_checkpoint(self) -> Checkpoint:
        b = self.best
        state = {"best_epoch": self.history.best_epoch, "best_val": repr(float(self.best_val))}
        return Checkpoint(self.spec, {k: v.copy() for k, v in b["params"].items()},
                          dict(b["m"]), dict(b["v"]), b["step"], b["epoch"], self.cfg.seed, state)

    def _restore(self, ck: Checkpoint) -> None:
        if ck.spec != self.spec:
            raise CompatibilityError("checkpoint spec differs from the training spec")
        for k in self.graph.params:
            self.graph.params[k][...] = ck.params[k]
            self.adam.m[k] = ck.m[k].copy()
            self.adam.v[k] = ck.v[k].copy()
        self.adam.t = ck.step
        self.epoch = ck.epoch
        self.best_val = float(ck.state["best_val"])
        self.bad_epochs = int(ck.state["bad_epochs"])
        self.history = TrainHistory.from_array(self.heads, ck.extra["history"],
                                               int(ck.state["best_epoch"]), ck.state.get("stop_reason", ""))
        self.best = {
            key: {k[len(f"best.{key}/"):]: v.copy() for k, v in ck.extra.items() if k.startswith(f"best.{key}/")}
            for key in ("params", "m", "v")
        }
        self.best["step"] = int(ck.state["best_step"])
        self.best["epoch"] = self.history.best_epoch

    # loop --------------------------------------------------------------------------

    def _evaluate(self, x, y) -> tuple[float, list[float], float]:
        total, per_head, ious = 0.0, np.zeros(len(self.heads)), []
        bs = self.cfg.batch_size
        for k in range(0, len(x), bs):
            xb, yb = x[k:k + bs], y[k:k + bs]
            out = self.graph.forward({arch.IMAGE: xb, LABEL: yb},
                                     targets=[LOSS] + [f"loss@{h}" for h in self.heads] + self.heads)
            w = len(xb) / len(x)
            total += w * float(out[LOSS][0])
            per_head += w * np.array([float(out[f"loss@{h}"][0]) for h in self.heads])
            prob = sum(out[h] for h in self.heads) / len(self.heads)
            ious.extend(segmentation_metrics(prob[n], yb[n])["IoU"] for n in range(len(xb)))
        return total, per_head.tolist(), float(np.mean(ious))

    def run_epoch(self) -> dict:
        cfg = self.cfg
        order = Rng(cfg.seed).spawn("shuffle", self.epoch).permutation(len(self.x_train))
        train_loss = 0.0
        for idx in _batches(len(order), cfg.batch_size, order):
            feeds = {arch.IMAGE: self.x_train[idx], LABEL: self.y_train[idx]}
            loss = float(self.graph.forward(feeds, targets=[LOSS])[LOSS][0])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss in epoch {self.epoch + 1}")
            grads = self.graph.backward(LOSS)
            self.adam.step(self.graph.params, grads)
            train_loss += loss * len(idx) / len(order)
        val_loss, head_losses, val_iou = self._evaluate(self.x_val, self.y_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss in epoch {self.epoch + 1}")
        self.epoch += 1
        row = {"epoch": self.epoch, "train_loss": train_loss, "val_loss": val_loss, "val_iou": val_iou}
        row.update({f"val_loss@{h}": v for h, v in zip(self.heads, head_losses)})
        self.history.rows.append(row)
        if val_loss < self.best_val:
            self.best_val, self.bad_epochs = val_loss, 0
            self.history.best_epoch = self.epoch
            self.best = self._snapshot()
        else:
            self.bad_epochs += 1
        return row

    def run(self, max_epochs: int | None = None) -> TrainHistory:
        """Train until ``max_epochs`` total epochs or early stop."""
        limit = self.cfg.max_epochs if max_epochs is None else max_epochs
        while self.epoch < limit and not self.history.stop_reason:
            self.run_epoch()
            if self.bad_epochs >= self.cfg.patience:
                self.history.stop_reason = "early_stop"
        if not self.history.stop_reason and self.epoch >= self.cfg.max_epochs:
            self.history.stop_reason = "max_epochs"
        return self.history


def train(spec: ArchSpec, data: Dataset, cfg: TrainConfig = TrainConfig()) -> tuple[Checkpoint, TrainHistory]:
    """Train from scratch; returns the best-validation-loss checkpoint and the history."""
    trainer = Trainer(spec, data, cfg)
    history = trainer.run()
    return trainer.best_checkpoint(), history


# -- inference -------------------------------------------------------------------------------

def parse_mode(mode) -> tuple[str, int | None]:
    """``"ensemble"``, ``"pruned:k"`` or ``("pruned", k)``."""
    if isinstance(mode, tuple):
        return mode[0], (None if len(mode) < 2 else int(mode[1]))
    if mode == "ensemble":
        return "ensemble", None
    if isinstance(mode, str) and mode.startswith("pruned:"):
        return "pruned", int(mode.split(":", 1)[1])
    raise ValueError(f"unknown mode {mode!r}; use 'ensemble' or 'pruned:k'")


def _as_model(model) -> Graph:
    if isinstance(model, Checkpoint):
        return model_from_checkpoint(model)
    return model


def pruned_model(model: Graph, k: int) -> Graph:
    cache = model.meta.setdefault("pruned", {})
    if k not in cache:
        cache[k] = arch.prune(model, k)
    return cache[k]


def predict(model, image, mode="ensemble") -> np.ndarray:
    """Per-pixel class probabilities for ``image`` ([C, H, W] or [N, C, H, W])."""
    graph = _as_model(model)
    spec: ArchSpec = graph.meta["spec"]
    x = np.asarray(image, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    step = 2 ** spec.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"image {x.shape[2]}x{x.shape[3]} not divisible by 2^{spec.depth}; "
                         "use sliding_window_predict")
    kind, k = parse_mode(mode)
    if kind == "ensemble":
        heads = arch.heads(graph)
        out = graph.forward({arch.IMAGE: x}, targets=heads)
        prob = sum(out[h] for h in heads) / len(heads)
    else:
        sub = pruned_model(graph, k)
        h = arch.head_name(k)
        prob = sub.forward({arch.IMAGE: x}, targets=[h])[h]
    return prob[0] if single else prob


def sliding_window_predict(model, image, patch, stride, mode="ensemble", batch_size: int = 16) -> np.ndarray:
    """Predict overlapping patches and average probabilities where they overlap.

    ``model`` is a graph/checkpoint, or any callable mapping a batch
    [N, C, ph, pw] to probabilities [N, K, ph, pw].
    """
    x = np.asarray(image, dtype=DTYPE)
    _, h, w = x.shape
    ph, pw = patch
    sh, sw = stride
    if ph > h or pw > w:
        raise ShapeError(f"patch {ph}x{pw} larger than image {h}x{w}")
    if sh > ph or sw > pw:
        raise ShapeError("stride must not exceed the patch size")
    if callable(model) and not isinstance(model, (Graph, Checkpoint)):
        fn = model
    else:
        graph = _as_model(model)
        fn = lambda batch: predict(graph, batch, mode)  # noqa: E731
    origins = [(y, x0) for y in tile_origins(h, ph, sh) for x0 in tile_origins(w, pw, sw)]
    total = count = None
    for k in range(0, len(origins), batch_size):
        chunk = origins[k:k + batch_size]
        batch = np.stack([x[:, y:y + ph, x0:x0 + pw] for y, x0 in chunk])
        probs = np.asarray(fn(batch), dtype=DTYPE)
        if total is None:
            total = np.zeros((probs.shape[1], h, w))
            count = np.zeros((1, h, w))
        for (y, x0), p in zip(chunk, probs):
            total[:, y:y + ph, x0:x0 + pw] += p
            count[:, y:y + ph, x0:x0 + pw] += 1
    return total / count


def predict_any(model, image, mode="ensemble", patch=None, stride=None) -> np.ndarray:
    """predict() when the image fits the network, sliding windows otherwise."""
    graph = _as_model(model)
    step = 2 ** graph.meta["spec"].depth
    _, h, w = np.shape(image)
    if h % step == 0 and w % step == 0:
        return predict(graph, image, mode)
    if patch is None:
        patch = (h - h % step, w - w % step)
    if stride is None:
        stride = (max(1, patch[0] // 2), max(1, patch[1] // 2))
    return sliding_window_predict(graph, image, patch, stride, mode)


def evaluate(model, samples, mode="ensemble", threshold=0.5, patch=None, stride=None) -> list[dict]:
    """Per-image metric records (image_id, size_bucket and the six metrics).

    ``model`` may also be a callable mapping an image [C, H, W] to probabilities.
    """
    stub = callable(model) and not isinstance(model, (Graph, Checkpoint))
    graph = None if stub else _as_model(model)
    rows = []
    for s in samples:
        if stub:
            prob = model(s.image)
        elif patch is not None:
            prob = sliding_window_predict(graph, s.image, patch, stride or (patch[0] // 2, patch[1] // 2), mode)
        else:
            prob = predict_any(graph, s.image, mode)
        rec = {"image_id": s.id, "size_bucket": s.size_bucket}
        rec.update(segmentation_metrics(prob, s.mask, threshold))
        rows.append(rec)
    return rows


def time_inference(model, images, mode, repeats: int = 3, batch_size: int = 16) -> float:
    """Median wall time (seconds) to predict every image, over ``repeats`` runs."""
    graph = _as_model(model)
    x = np.asarray(images, dtype=DTYPE)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        for k in range(0, len(x), batch_size):
            predict(graph, x[k:k + batch_size], mode)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


# -- embedded vs isolated --------------------------------------------------------------------

@dataclass
class EmbeddedReport:
    keep_depth: int
    embedded_iou: float
    embedded_dice: float
    isolated_iou: float
    isolated_dice: float
    structurally_equal: bool

    @property
    def delta_iou(self) -> float:
        return self.embedded_iou - self.isolated_iou

    @property
    def delta_dice(self) -> float:
        return self.embedded_dice - self.isolated_dice


def _mean_metric(rows, key):
    return float(np.mean([r[key] for r in rows]))


def embedded_vs_isolated(spec: ArchSpec, data: Dataset, cfg: TrainConfig, keep_depth: int) -> EmbeddedReport:
    """Train full UNet++ then prune, versus training the shallow UNet++ alone."""
    if spec.variant != "unet_pp" or not spec.deep_supervision:
        raise ValueError("embedded_vs_isolated needs a deeply supervised unet_pp spec")
    if not 1 <= keep_depth <= spec.depth:
        raise ValueError(f"keep_depth must lie in 1..{spec.depth}")
    test = data.split("test")
    full, _ = train(spec, data, cfg)
    full_graph = model_from_checkpoint(full)
    embedded = evaluate(full_graph, test, f"pruned:{keep_depth}")

    small_spec = spec.with_depth(keep_depth)
    small, _ = train(small_spec, data, cfg)
    small_graph = model_from_checkpoint(small)
    isolated = evaluate(small_graph, test, f"pruned:{keep_depth}")

    # the deployed sub-networks always match; the trained ones only when nothing is pruned
    trained_equal = set(arch.arch_nodes(full_graph)) == set(arch.arch_nodes(small_graph))
    return EmbeddedReport(
        keep_depth,
        _mean_metric(embedded, "IoU"), _mean_metric(embedded, "Dice"),
        _mean_metric(isolated, "IoU"), _mean_metric(isolated, "Dice"),
        trained_equal,
    )
