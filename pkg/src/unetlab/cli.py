"""Command-line entry point: ``unetlab <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import arch
from .arch import ArchSpec
from .config import ConfigError, RunConfig
from .data import GenerationError, gen_synthetic, load_dataset, load_pgm_float, write_pgm
from .gradcheck import OP_CHECKS, check_net, check_op
from .losses import METRIC_NAMES, two_sample_ttest
from .plots import line_chart
from .tensor import Rng, write_tensor
from .trainer import (
    Checkpoint,
    CompatibilityError,
    evaluate,
    model_from_checkpoint,
    parse_mode,
    pruned_model,
    time_inference,
    train,
)

COMMANDS = ("summary", "train", "eval", "prune-study", "gradcheck", "ablate", "featmap")


class ContractError(RuntimeError):
    pass


# -- output helpers --------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_atomic(path: Path, text: str | bytes) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(text, str):
        tmp.write_text(text, encoding="utf-8")
    else:
        tmp.write_bytes(text)
    os.replace(tmp, path)
    return path


def write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return write_atomic(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _mean_sd(values):
    values = np.asarray(values, dtype=float)
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), sd


# -- shared plumbing ----------------------------------------------------------------

def load_data(cfg: RunConfig):
    if cfg["synthetic"]:
        try:
            return gen_synthetic(cfg.synth_config())
        except GenerationError as exc:
            raise ConfigError(f"synthetic data: {exc}") from None
    if not cfg["data_dir"]:
        raise ConfigError("no dataset: give data_dir or --synthetic")
    return load_dataset(cfg["data_dir"])


def load_checkpoint(cfg: RunConfig) -> Checkpoint:
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint is required for this command")
    return Checkpoint.load(cfg["checkpoint"])


def _check_compat(spec: ArchSpec, ds) -> None:
    s = ds.samples[0]
    if s.image.shape[0] != spec.input[0] or s.mask.shape[0] != spec.classes:
        raise CompatibilityError(
            f"checkpoint expects {spec.input[0]}-channel images and {spec.classes} classes; "
            f"dataset has {s.image.shape[0]} and {s.mask.shape[0]}")


def _mode(cfg: RunConfig, spec: ArchSpec) -> str:
    try:
        kind, k = parse_mode(cfg["mode"])
    except ValueError as exc:
        raise ConfigError(f"mode: {exc}") from None
    if kind == "pruned":
        if not 1 <= k <= spec.depth:
            raise ConfigError(f"mode: pruned level must lie in 1..{spec.depth}")
        if k not in arch.head_columns(spec):
            raise ContractError(f"checkpoint has no head at X^{{0,{k}}} (trained without deep supervision)")
    return cfg["mode"]


def _window(cfg: RunConfig) -> dict:
    patch, stride = cfg["patch"] or None, cfg["stride"] or None
    for key, v in (("patch", patch), ("stride", stride)):
        if v is not None and len(v) != 2:
            raise ConfigError(f"{key}: expected h,w")
    return {"patch": patch, "stride": stride}


# -- commands -------------------------------------------------------------------------------

def cmd_summary(cfg: RunConfig, out: Path) -> int:
    spec = cfg.arch_spec()
    g = arch.build(spec, Rng(cfg["seed"]).spawn("init"))
    s = arch.summary(g)
    ds_note = "with DS" if spec.deep_supervision else "without DS"
    print(f"{spec.variant} d={spec.depth} widths={list(spec.widths)}")
    print(s.text())
    print(f"{len(arch.arch_nodes(g))} nodes, {len(s.heads)} heads({ds_note})")
    print("heads: " + ", ".join(s.heads))
    print(f"params: {arch.param_count(g):,}")
    counts = {}
    for v in ("unet", "unet_plus", "unet_pp"):
        counts[v] = arch.param_count(arch.build(ArchSpec(v, spec.depth, spec.widths, spec.classes, False,
                                                         spec.input, spec.convs_per_block), Rng(0)))
    print("param ordering: " + " < ".join(f"{v}={c:,}" for v, c in counts.items()))
    write_atomic(out / "summary.csv", s.csv())
    write_atomic(out / "graph.dot", arch.to_dot(g))
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    spec = cfg.arch_spec()
    ds = load_data(cfg)
    trials = cfg["trials"]
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    histories = []
    for k in range(trials):
        tcfg = cfg.train_config(seed=cfg["seed"] + k)
        ck, hist = train(spec, ds, tcfg)
        ck.save(out / f"checkpoint_trial{k}.nnck")
        write_atomic(out / f"history_trial{k}.csv", hist.to_csv())
        histories.append(hist)
        print(f"trial {k}: seed={tcfg.seed} epochs={len(hist.rows)} best_epoch={hist.best_epoch} "
              f"stop={hist.stop_reason} best_val_loss={hist.rows[hist.best_epoch - 1]['val_loss']:.6f}")
    cols = ("train_loss", "val_loss", "val_iou")
    n_epochs = max(len(h.rows) for h in histories)
    rows = []
    for e in range(n_epochs):
        present = [h.rows[e] for h in histories if len(h.rows) > e]
        row = [e + 1, len(present)]
        for c in cols:
            row.extend(_mean_sd([r[c] for r in present]))
        rows.append(row)
    header = ["epoch", "trials"] + [f"{c}_{s}" for c in cols for s in ("mean", "sd")]
    write_csv(out / "learning_curve.csv", header, rows)
    epochs = [r[0] for r in rows]
    write_atomic(out / "learning_curve.svg", line_chart(
        {"train loss": (epochs, [r[2] for r in rows]), "val loss": (epochs, [r[4] for r in rows])},
        f"{spec.variant} d={spec.depth}: mean over {trials} trial(s)", "epoch", "loss"))
    return 0


def _eval_rows(rows, variant, mode):
    header = ["image_id", "variant", "mode"] + list(METRIC_NAMES)
    body = [[r["image_id"], variant, mode] + [r[m] for m in METRIC_NAMES] for r in rows]
    stats = [_mean_sd([r[m] for r in rows]) for m in METRIC_NAMES]
    body.append(["mean", variant, mode] + [s[0] for s in stats])
    body.append(["sd", variant, mode] + [s[1] for s in stats])
    return header, body


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    ck = load_checkpoint(cfg)
    spec = ck.spec
    mode = _mode(cfg, spec)
    ds = load_data(cfg)
    _check_compat(spec, ds)
    test = ds.split("test")
    if not test:
        raise ContractError("dataset has no test split")
    model = model_from_checkpoint(ck)
    rows = evaluate(model, test, mode, cfg["threshold"], **_window(cfg))
    header, body = _eval_rows(rows, spec.variant, mode)
    write_csv(out / "metrics.csv", header, body)
    means = body[-2]
    print("  ".join(f"{m}={v:.4f}" for m, v in zip(METRIC_NAMES, means[3:])))

    if cfg["stratify"]:
        if cfg["stratify"] != "size_bucket":
            raise ConfigError("stratify: only 'size_bucket' is supported")
        strata = []
        for b in sorted({r["size_bucket"] for r in rows}):
            sel = [r for r in rows if r["size_bucket"] == b]
            row = [b, len(sel)]
            for m in METRIC_NAMES:
                row.extend(_mean_sd([r[m] for r in sel]))
            strata.append(row)
        write_csv(out / "strata.csv", ["size_bucket", "n"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "sd")],
                  strata)
        print(f"{len(strata)} size buckets")

    if cfg["baseline"]:
        base = [r for r in read_csv(cfg["baseline"]) if r["image_id"] not in ("mean", "sd")]
        tests = []
        groups = [("all", rows, base)]
        if cfg["stratify"]:
            ids = {s.id: s.size_bucket for s in test}
            for b in sorted({r["size_bucket"] for r in rows}):
                groups.append((f"size_bucket={b}", [r for r in rows if r["size_bucket"] == b],
                               [r for r in base if ids.get(r["image_id"]) == b]))
        for label, mine, theirs in groups:
            for m in METRIC_NAMES:
                a = [r[m] for r in mine]
                b = [float(r[m]) for r in theirs]
                if len(a) < 2 or len(b) < 2:
                    continue
                res = two_sample_ttest(a, b)
                tests.append([label, m, res.t, res.p, res.significant])
        write_csv(out / "ttest.csv", ["group", "metric", "t", "p", "significant"], tests)
    return 0


def cmd_prune_study(cfg: RunConfig, out: Path) -> int:
    ck = load_checkpoint(cfg)
    spec = ck.spec
    if not spec.deep_supervision or spec.variant == "unet":
        raise ContractError("prune-study needs a deeply supervised checkpoint")
    ds = load_data(cfg)
    _check_compat(spec, ds)
    test = ds.split("test")
    model = model_from_checkpoint(ck)
    images = np.stack([s.image for s in test])
    levels = list(range(1, spec.depth + 1))
    res = {}
    for k in levels:
        mode = f"pruned:{k}"
        rows = evaluate(model, test, mode, cfg["threshold"], **_window(cfg))
        res[k] = {
            "params": arch.param_count(pruned_model(model, k)),
            "IoU": float(np.mean([r["IoU"] for r in rows])),
            "Dice": float(np.mean([r["Dice"] for r in rows])),
        }
    # time deepest first so any warm-up cost is charged to the full model
    for k in reversed(levels):
        res[k]["time"] = time_inference(model, images, f"pruned:{k}", cfg["timing_repeats"])
    full = res[spec.depth]

    def pct(a, b):
        if b == 0:
            # relative change from zero is undefined unless nothing changed
            return 0.0 if a == 0 else float("nan")
        return 100.0 * (a - b) / b

    write_csv(out / "tradeoff.csv",
              ["level", "params", "params_delta_pct", "IoU", "IoU_delta_pct", "Dice", "Dice_delta_pct"],
              [[f"L{k}", res[k]["params"], pct(res[k]["params"], full["params"]), res[k]["IoU"],
                pct(res[k]["IoU"], full["IoU"]), res[k]["Dice"], pct(res[k]["Dice"], full["Dice"])]
               for k in levels])
    # wall-clock numbers are not reproducible, so they live in their own file
    write_csv(out / "timing.csv", ["level", "images", "median_seconds", "time_delta_pct"],
              [[f"L{k}", len(test), res[k]["time"], pct(res[k]["time"], full["time"])] for k in levels])
    write_atomic(out / "tradeoff.svg", line_chart(
        {"IoU": ([res[k]["params"] for k in levels], [res[k]["IoU"] for k in levels])},
        "pruning trade-off (L1 .. L%d)" % spec.depth, "parameters", "IoU"))
    for k in levels:
        r = res[k]
        print(f"L{k}: params={r['params']:,} ({pct(r['params'], full['params']):+.1f}%) "
              f"time={r['time']:.4f}s ({pct(r['time'], full['time']):+.1f}%) IoU={r['IoU']:.4f} Dice={r['Dice']:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    size, depth = cfg["gradcheck_size"], cfg["gradcheck_depth"]
    if size > 16:
        raise ConfigError("gradcheck_size must be <= 16")
    target = cfg["op"]
    if target not in ("all", "net") + OP_CHECKS:
        raise ConfigError(f"op: unknown gradcheck target {target!r}")
    tol = cfg["tolerance"]
    if tol <= 0:
        raise ConfigError("tolerance must be positive")
    seeds = [cfg["seed"] + k for k in range(cfg["gradcheck_seeds"])]
    rows, ok = [], True
    ops = OP_CHECKS if target == "all" else (() if target == "net" else (target,))
    for op in ops:
        for seed in seeds:
            rep = check_op(op, seed, tol)
            rows.append([op, seed, rep.checked, rep.one_sided, rep.skipped, rep.max_rel_error, rep.passed])
            ok &= rep.passed
            print(f"{op:<12} seed={seed} {rep}")
    if target in ("all", "net"):
        spec = cfg.arch_spec(depth=depth, input=(cfg["in_channels"], size, size))
        for seed in seeds:
            rep = check_net(spec, seed, tol, cfg.loss_config())
            name = f"net:{spec.variant}:d{depth}"
            rows.append([name, seed, rep.checked, rep.one_sided, rep.skipped, rep.max_rel_error, rep.passed])
            ok &= rep.passed
            print(f"{name:<12} seed={seed} {rep}")
    write_csv(out / "gradcheck.csv",
              ["target", "seed", "coords", "one_sided", "skipped", "max_rel_error", "passed"], rows)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


ABLATION = (
    ("U-Net L1", "unet", 1, False),
    ("U-Net L2", "unet", 2, False),
    ("U-Net L3", "unet", 3, False),
    ("U-Net L4", "unet", 4, False),
    ("U-Net^e", "unet_e", None, True),
    ("UNet+", "unet_plus", None, False),
    ("UNet+", "unet_plus", None, True),
    ("UNet++", "unet_pp", None, False),
    ("UNet++", "unet_pp", None, True),
)


SOFT_MARGIN_POINTS = 1.0


def ablation_rows(depth: int):
    """(label, variant, depth, DS) for the U-Net depth sweep and the new variants."""
    rows = []
    for label, variant, d, ds in ABLATION:
        if variant == "unet":
            if d > depth:
                continue
            label = f"U-Net L{d}"
        rows.append((label, variant, depth if d is None else d, ds))
    return rows


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    depth = cfg["depth"]
    ds = load_data(cfg)
    test = ds.split("test")
    trials = cfg["trials"]
    trial_rows, agg_rows, means = [], [], {}
    for label, variant, d, dsup in ablation_rows(depth):
        spec = cfg.arch_spec(variant=variant, depth=d, deep_supervision=dsup)
        params = arch.param_count(arch.build(spec, Rng(0)))
        ious, dices = [], []
        for k in range(trials):
            seed = cfg["seed"] + k
            ck, _ = train(spec, ds, cfg.train_config(seed=seed))
            rows = evaluate(model_from_checkpoint(ck), test, "ensemble", cfg["threshold"])
            iou = float(np.mean([r["IoU"] for r in rows]))
            dice = float(np.mean([r["Dice"] for r in rows]))
            ious.append(iou)
            dices.append(dice)
            trial_rows.append(["trial", label, d, dsup, k, seed, params, iou, "", dice, ""])
            print(f"{label:<9} DS={'yes' if dsup else 'no ':<3} trial={k} IoU={iou:.4f} Dice={dice:.4f}", flush=True)
        (im, isd), (dm, dsd) = _mean_sd(ious), _mean_sd(dices)
        agg_rows.append(["aggregate", label, d, dsup, "", "", params, im, isd, dm, dsd])
        means[(label, dsup)] = im
    write_csv(out / "ablation.csv",
              ["row", "architecture", "depth", "ds", "trial", "seed", "params", "IoU", "IoU_sd", "Dice", "Dice_sd"],
              trial_rows + agg_rows)
    for r in agg_rows:
        print(f"{r[1]:<9} DS={'yes' if r[3] else 'no ':<3} params={r[6]:>10,}  IoU={100 * r[7]:.2f}±{100 * r[8]:.2f}")
    base = means.get((f"U-Net L{depth}", False))
    best = means.get(("UNet++", True))
    if base is not None and best is not None:
        diff = 100 * (best - base)
        verdict = "PASS" if diff >= -SOFT_MARGIN_POINTS else "FAIL"
        print(f"soft check {verdict}: UNet++ (DS) - U-Net L{depth} = {diff:+.2f} IoU points "
              f"(allowed down to -{SOFT_MARGIN_POINTS:.1f})")
    return 0


def cmd_featmap(cfg: RunConfig, out: Path) -> int:
    ck = load_checkpoint(cfg)
    model = model_from_checkpoint(ck)
    ref = cfg["image"]
    if not ref:
        raise ConfigError("image is required (dataset image id or PGM path)")
    if ref.endswith(".pgm"):
        image = load_pgm_float(ref)[None]
    else:
        ds = load_data(cfg)
        match = [s for s in ds if s.id == ref]
        if not match:
            raise ConfigError(f"image: no sample with id {ref!r}")
        image = match[0].image
    nodes = [n for n in arch.arch_nodes(model) if arch.parse_node_name(n)[0] == 0]
    values = model.forward({arch.IMAGE: image[None]}, targets=nodes)
    for name in nodes:
        j = arch.parse_node_name(name)[1]
        fmap = values[name][0].mean(axis=0)
        lo, hi = float(fmap.min()), float(fmap.max())
        if hi > lo:
            scaled = np.round((fmap - lo) / (hi - lo) * 65535)
        else:
            scaled = np.full(fmap.shape, 32768.0)
        write_pgm(out / f"featmap_X0_{j}.pgm", scaled.astype(np.uint16))
        buf = io.BytesIO()
        write_tensor(buf, fmap)
        write_atomic(out / f"featmap_X0_{j}.nnt", buf.getvalue())
        print(f"{name}: channel-mean range [{lo:.4g}, {hi:.4g}] -> featmap_X0_{j}.pgm")
    return 0


HANDLERS = {
    "summary": cmd_summary,
    "train": cmd_train,
    "eval": cmd_eval,
    "prune-study": cmd_prune_study,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "featmap": cmd_featmap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unetlab", description="U-Net / UNet++ segmentation laboratory")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--synthetic", action="store_true", default=None, help="generate the synthetic dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", help="ensemble | pruned:k")
    p.add_argument("--stratify")
    p.add_argument("--baseline")
    p.add_argument("--image")
    p.add_argument("--op")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    return p


FLAG_KEYS = ("seed", "trials", "synthetic", "checkpoint", "mode", "stratify", "baseline", "image", "op", "tolerance")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    for key in FLAG_KEYS:
        value = getattr(args, key)
        if value is not None:
            cfg.set(key, value)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "config.txt", cfg.to_text())
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, CompatibilityError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
