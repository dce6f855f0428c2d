"""Plain-text ``key=value`` run configuration shared by every CLI command."""
from __future__ import annotations

from pathlib import Path

from .arch import ArchSpec
from .data import SynthConfig
from .losses import LossConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


def _floats(s: str) -> tuple:
    s = s.strip()
    return tuple(float(v) for v in s.split(",")) if s else ()


# key: (default text, parser, description)
OPTIONS = {
    # architecture
    "variant": ("unet_pp", str, "unet | unet_e | unet_plus | unet_pp"),
    "depth": ("3", int, "number of down-sampling stages d"),
    "widths": ("", _ints, "channels per level, comma separated; empty = base_width * 2^i"),
    "base_width": ("8", int, "level-0 width used when widths is empty"),
    "classes": ("1", int, "number of output classes C"),
    "deep_supervision": ("true", _bool, "attach a head to every X^{0,j}"),
    "in_channels": ("1", int, "image channels"),
    "height": ("64", int, "network input height"),
    "width": ("64", int, "network input width"),
    "convs_per_block": ("2", int, "conv+relu layers per block"),
    # training
    "learning_rate": ("3e-4", float, "Adam learning rate"),
    "batch_size": ("4", int, "minibatch size"),
    "max_epochs": ("30", int, "epoch limit"),
    "patience": ("5", int, "early-stop patience in epochs"),
    "seed": ("7", int, "master seed"),
    "trials": ("1", int, "independent trials (seeds seed, seed+1, ...)"),
    "eps_log": ("1e-12", float, "log clamp"),
    "eps_dice": ("1e-12", float, "dice denominator smoothing"),
    "head_weights": ("", _floats, "per-head loss weights; empty = all 1"),
    "full_bce": ("true", _bool, "add (1-y)log(1-p) to the loss"),
    # synthetic data
    "synthetic": ("false", _bool, "generate the dataset instead of loading data_dir"),
    "synth_count": ("200", int, "number of synthetic images"),
    "synth_height": ("64", int, "synthetic image height"),
    "synth_width": ("64", int, "synthetic image width"),
    "blobs_min": ("1", int, "minimum blobs per image"),
    "blobs_max": ("3", int, "maximum blobs per image"),
    "radius_min": ("3", float, "smallest blob radius (px)"),
    "radius_max": ("14", float, "largest blob radius (px)"),
    "deformation": ("0.25", float, "boundary deformation amplitude"),
    "noise": ("0.05", float, "additive Gaussian noise std"),
    "multiscale": ("true", _bool, "log-uniform radii (mixed object sizes)"),
    "synth_seed": ("7", int, "generator seed"),
    # paths and evaluation
    "data_dir": ("", str, "dataset directory with manifest.tsv"),
    "checkpoint": ("", str, "checkpoint file for eval / prune-study / featmap"),
    "mode": ("ensemble", str, "ensemble | pruned:k"),
    "threshold": ("0.5", float, "binarisation threshold"),
    "patch": ("", _ints, "sliding-window patch h,w for images the net cannot take whole"),
    "stride": ("", _ints, "sliding-window stride h,w (default half patch)"),
    "stratify": ("", str, "'size_bucket' to emit per-bucket rows"),
    "baseline": ("", str, "metrics.csv to t-test against"),
    "timing_repeats": ("3", int, "runs per timing measurement (median taken)"),
    "image": ("", str, "featmap input: dataset image id or PGM path"),
    # gradient check
    "op": ("all", str, "gradcheck target: all | net | conv2d | conv_block | downsample | upsample | head | concat | hybrid_loss"),
    "tolerance": ("1e-4", float, "gradcheck max relative error"),
    "gradcheck_depth": ("2", int, "depth of the whole-net gradcheck"),
    "gradcheck_size": ("16", int, "input height/width of the whole-net gradcheck (<= 16)"),
    "gradcheck_seeds": ("3", int, "seeds per gradcheck"),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.raw = {k: v[0] for k, v in OPTIONS.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in OPTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        text = value if isinstance(value, str) else _format(value)
        try:
            OPTIONS[key][1](text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        self.raw[key] = text

    def __getitem__(self, key: str):
        return OPTIONS[key][1](self.raw[key])

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, str(path))

    def to_text(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in OPTIONS)

    # typed views --------------------------------------------------------------

    def widths(self, depth: int | None = None) -> tuple:
        depth = self["depth"] if depth is None else depth
        widths = self["widths"]
        if not widths:
            return tuple(self["base_width"] * 2 ** i for i in range(depth + 1))
        if len(widths) < depth + 1:
            raise ConfigError(f"widths: need {depth + 1} entries for depth {depth}")
        return widths[:depth + 1]

    def arch_spec(self, **overrides) -> ArchSpec:
        depth = overrides.pop("depth", self["depth"])
        fields = dict(
            variant=self["variant"],
            depth=depth,
            widths=self.widths(depth),
            classes=self["classes"],
            deep_supervision=self["deep_supervision"],
            input=(self["in_channels"], self["height"], self["width"]),
            convs_per_block=self["convs_per_block"],
        )
        fields.update(overrides)
        spec = ArchSpec(**fields)
        try:
            return spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_config(self) -> LossConfig:
        weights = self["head_weights"] or None
        try:
            return LossConfig(self["eps_log"], self["eps_dice"], weights, self["full_bce"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, seed: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(
                learning_rate=self["learning_rate"],
                batch_size=self["batch_size"],
                max_epochs=self["max_epochs"],
                patience=self["patience"],
                seed=self["seed"] if seed is None else seed,
                loss=self.loss_config(),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            count=self["synth_count"],
            size=(self["synth_height"], self["synth_width"]),
            blobs=(self["blobs_min"], self["blobs_max"]),
            radius=(self["radius_min"], self["radius_max"]),
            deformation=self["deformation"],
            noise=self["noise"],
            multiscale=self["multiscale"],
            classes=self["classes"],
            seed=self["synth_seed"],
        )


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)
