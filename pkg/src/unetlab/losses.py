"""Hybrid log/soft-dice loss, deep-supervision total loss, metrics, t-test."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import special

from .autograd import Graph, register_op
from .tensor import DTYPE, ShapeError

LABEL = "label"
LOSS = "loss"


class LabelError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    eps_log: float = 1e-12
    eps_dice: float = 1e-12
    head_weights: tuple | None = None
    # False: y*log(p) as the cross-entropy term; True: y*log(p) + (1-y)*log(1-p)
    full_bce: bool = False

    def __post_init__(self):
        if self.eps_log <= 0 or self.eps_dice <= 0:
            raise ConfigError("eps_log and eps_dice must be positive")

    def weights(self, n_heads: int) -> tuple:
        if self.head_weights is None:
            return (1.0,) * n_heads
        if len(self.head_weights) != n_heads:
            raise ConfigError(f"{len(self.head_weights)} head weights for {n_heads} heads")
        return tuple(float(w) for w in self.head_weights)


def _check_pair(y, p):
    if y.shape != p.shape:
        raise ShapeError(f"label shape {y.shape} != prediction shape {p.shape}")
    if y.ndim != 4:
        raise ShapeError(f"expected [N, C, H, W] tensors, got rank {y.ndim}")


def _pixels(y):
    return y.shape[0] * y.shape[2] * y.shape[3]


def hybrid_loss(y, p, eps_log=1e-12, eps_dice=1e-12, full_bce=False):
    """-(1/N) * sum over pixels and classes of y log p + 2yp / (y^2 + p^2)."""
    y = np.asarray(y, dtype=DTYPE)
    p = np.asarray(p, dtype=DTYPE)
    _check_pair(y, p)
    if np.any((y != 0) & (y != 1)):
        raise LabelError("labels must be 0 or 1")
    pc = np.clip(p, eps_log, 1.0 - eps_log)
    per_pixel = y * np.log(pc) + 2.0 * y * p / (y * y + p * p + eps_dice)
    if full_bce:
        per_pixel = per_pixel + (1.0 - y) * np.log(1.0 - pc)
    return np.array([-per_pixel.sum() / _pixels(y)])


def hybrid_loss_grad(y, p, eps_log=1e-12, eps_dice=1e-12, full_bce=False):
    """d hybrid_loss / d p."""
    inside = (p >= eps_log) & (p <= 1.0 - eps_log)
    pc = np.clip(p, eps_log, 1.0 - eps_log)
    den = y * y + p * p + eps_dice
    g = np.where(inside, y / pc, 0.0) + 2.0 * y * (y * y + eps_dice - p * p) / (den * den)
    if full_bce:
        g = g - np.where(inside, (1.0 - y) / (1.0 - pc), 0.0)
    return -g / _pixels(y)


def _loss_fwd(y, p, **kw):
    return hybrid_loss(y, p, **kw)


def _loss_bwd(g, ins, out, **kw):
    return None, g.reshape(()) * hybrid_loss_grad(ins[0], ins[1], **kw)


register_op("hybrid_loss", _loss_fwd, _loss_bwd)


def total_loss(y, heads, cfg: LossConfig = LossConfig()):
    if not heads:
        raise ConfigError("need at least one head")
    weights = cfg.weights(len(heads))
    out = np.zeros(1)
    for w, p in zip(weights, heads):
        out = out + w * hybrid_loss(y, p, cfg.eps_log, cfg.eps_dice, cfg.full_bce)
    return out


def add_total_loss(graph: Graph, heads, cfg: LossConfig = LossConfig()) -> str:
    """Attach ``label`` placeholder, per-head losses and their weighted sum."""
    weights = cfg.weights(len(heads))
    if LABEL not in graph.nodes:
        graph.placeholder(LABEL)
    per_head = []
    for h in heads:
        name = f"loss@{h}"
        graph.add(name, "hybrid_loss", [LABEL, h], eps_log=cfg.eps_log, eps_dice=cfg.eps_dice,
                  full_bce=cfg.full_bce)
        graph.set_output(name, name)
        per_head.append(name)
    graph.add(LOSS, "weighted_sum", per_head, weights=weights)
    graph.set_output(LOSS, LOSS)
    return LOSS


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred, label):
        pred = np.asarray(pred, dtype=bool)
        label = np.asarray(label, dtype=bool)
        return cls(int(np.sum(pred & label)), int(np.sum(pred & ~label)),
                   int(np.sum(~pred & ~label)), int(np.sum(~pred & label)))

    def _ratio(self, num, den) -> Fraction:
        # empty denominators mean both masks agree on "nothing here"
        return Fraction(1) if den == 0 else Fraction(num, den)

    def exact(self) -> dict[str, Fraction]:
        tp, fp, tn, fn = self.tp, self.fp, self.tn, self.fn
        dice = self._ratio(2 * tp, 2 * tp + fp + fn)
        return {
            "IoU": self._ratio(tp, tp + fp + fn),
            "Dice": dice,
            "sensitivity": self._ratio(tp, tp + fn),
            "specificity": self._ratio(tn, tn + fp),
            "F1": dice,
            "F2": self._ratio(5 * tp, 5 * tp + 4 * fn + fp),
        }


METRIC_NAMES = ("IoU", "Dice", "sensitivity", "specificity", "F1", "F2")


def binarize(pred, threshold: float = 0.5):
    return np.asarray(pred) >= threshold


def segmentation_metrics(pred, label, threshold: float = 0.5) -> dict[str, float]:
    """IoU, Dice, sensitivity, specificity, F1, F2 of a thresholded prediction."""
    pred = np.asarray(pred, dtype=DTYPE)
    label = np.asarray(label, dtype=DTYPE)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {label.shape}")
    if np.any((label != 0) & (label != 1)):
        raise LabelError("labels must be 0 or 1")
    counts = ConfusionCounts.from_masks(binarize(pred, threshold), label > 0.5)
    return {k: float(v) for k, v in counts.exact().items()}


# -- statistics ---------------------------------------------------------------------

@dataclass
class TTestResult:
    t: float
    p: float
    df: float
    significant: bool = field(init=False)
    degenerate: bool = False

    def __post_init__(self):
        self.significant = self.p < 0.05


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularized incomplete beta."""
    x = df / (df + t * t)
    return float(special.betainc(df / 2.0, 0.5, x))


def two_sample_ttest(a, b) -> TTestResult:
    """Welch's unequal-variance t-test, two-sided."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        return TTestResult(0.0, 1.0, float(a.size + b.size - 2), degenerate=True)
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return TTestResult(float(t), student_t_sf2(t, df), float(df))
