"""Command-line driver: ``seeaunet <command> [flags]``.

Settings are resolved with the precedence flags > ``--config`` YAML file >
built-in defaults. The YAML file may hold ``model``, ``train`` and ``data``
sections plus a top-level ``out``; see the README for an example.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck, kernels
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .data import load_dataset, load_image, synth_split, write_dataset
from .errors import SeeaError
from .models import (
    ARCHS,
    PUBLISHED_COUNTS,
    ModelConfig,
    build_model,
    count_parameters,
    format_summary,
    resolve_arch,
    scan_published,
    summarize,
)
from .objectives import FocalLossConfig
from .training import (
    INIT_SEED_OFFSET,
    SYNTH_SEED_OFFSET,
    TrainConfig,
    compare_models,
    evaluate,
    predict,
    save_curves,
    train,
)

log = logging.getLogger("seeaunet")

# desk-scale network used by train/compare unless overridden
DESK_MODEL = {"base_filters": 16, "depth": 3, "se_reduction": 8}
OVERLAY_COLOUR = (255, 32, 32)


class CommandError(SeeaError):
    """Bad command-line usage; the message is shown to the user."""


# -- settings resolution -----------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"config file not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise CommandError(f"config file {p} must hold a mapping")
    unknown = sorted(set(doc) - {"model", "train", "data", "out"})
    if unknown:
        raise CommandError(f"config file {p}: unknown sections {unknown}")
    return doc


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _model_config(args, doc: dict, canonical: bool = False) -> ModelConfig:
    sec = dict(doc.get("model", {}))
    base = {} if canonical else dict(DESK_MODEL)
    size = args.size if getattr(args, "size", None) is not None else None
    values = {**base, **sec}
    if getattr(args, "model", None) is not None:
        values["arch"] = args.model
    values["arch"] = resolve_arch(values.get("arch", "seea_unet"))
    for flag, key in (("base_filters", "base_filters"), ("depth", "depth"),
                      ("se_reduction", "se_reduction"), ("layout", "layout"), ("in_channels", "in_channels")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if size is not None:
        values["input_size"] = (size, size)
    elif "input_size" not in values and not canonical:
        values["input_size"] = (64, 64)
    return ModelConfig.from_dict(values)


def _train_config(args, doc: dict) -> TrainConfig:
    sec = dict(doc.get("train", {}))
    cfg = TrainConfig.from_dict(sec) if sec else TrainConfig()
    updates = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("seed", "seed"), ("patience", "early_stop_patience"), ("monitor", "monitor")):
        v = getattr(args, flag, None)
        if v is not None:
            updates[key] = v
    gamma, alpha = getattr(args, "gamma", None), getattr(args, "alpha", None)
    if gamma is not None or alpha is not None:
        loss = cfg.loss
        updates["loss"] = FocalLossConfig(
            gamma=loss.gamma if gamma is None else gamma,
            alpha=loss.alpha if alpha is None else alpha,
            epsilon_clip=loss.epsilon_clip,
        )
    return replace(cfg, **updates) if updates else cfg


def _load_data(args, doc: dict, size, seed: int):
    """(train, val) samples from ``--data`` or ``--synth``; flags beat the file."""
    sec = dict(doc.get("data", {}))
    root = _pick(getattr(args, "data", None), sec, "root", None)
    n_synth = _pick(getattr(args, "synth", None), sec, "synth", None)
    if getattr(args, "data", None) is not None:
        n_synth = None
    elif getattr(args, "synth", None) is not None:
        root = None
    data_seed = _pick(getattr(args, "data_seed", None), sec, "seed", seed)
    if root is not None:
        root = Path(root)
        if not root.exists():
            raise CommandError(f"data root does not exist: {root}")
        split = load_dataset(root, size, _pick(None, sec, "split_fraction", 0.8), data_seed)
        log.info("loaded %d train / %d val samples from %s", len(split.train), len(split.val), root)
        return split.train, split.val
    if n_synth is not None:
        n = int(n_synth)
        if n < 1:
            raise CommandError(f"--synth needs a positive sample count, got {n}")
        return synth_split(n, max(1, n // 4), size, data_seed + SYNTH_SEED_OFFSET)
    raise CommandError("no data: pass --data DIR or --synth N")


def _out_dir(args, doc: dict, default: str) -> Path:
    out = Path(_pick(getattr(args, "out", None), doc, "out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    doc = _read_config(args.config)
    tcfg = _train_config(args, doc)
    mcfg = _model_config(args, doc)
    train_s, val_s = _load_data(args, doc, mcfg.input_size, tcfg.seed)
    out = _out_dir(args, doc, "runs/train")
    model = build_model(mcfg, seed=tcfg.seed + INIT_SEED_OFFSET)
    params, report = train(model, train_s, val_s, tcfg)
    if args.no_timing:
        for r in report.rows:
            r.wall_seconds = 0.0
    report.write_csv(out / "report.csv")
    save_checkpoint(params, out / "best.ckpt", report.config)
    save_curves(report, out)
    last = report.rows[-1]
    print(f"{mcfg.arch}: {len(report.rows)} epochs, best epoch {report.best_epoch}, "
          f"val loss {last.val_loss:.6f}, val jaccard {last.val_jaccard:.4f}")
    print(f"wrote {out / 'report.csv'}, {out / 'best.ckpt'}, {out / 'loss.png'}, {out / 'jaccard.png'}")
    return 0


def _restore(path):
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path}")
    store, config = load_checkpoint(path)
    if "model" not in config:
        raise CommandError(f"{path}: checkpoint lacks a model config snapshot")
    mcfg = ModelConfig.from_dict(config["model"])
    model = build_model(mcfg)
    restore_into(model.params, store)
    return model, config


def cmd_evaluate(args) -> int:
    doc = _read_config(args.config)
    model, config = _restore(args.checkpoint)
    tcfg = TrainConfig.from_dict(config["train"]) if "train" in config else TrainConfig()
    tcfg = replace(tcfg, **({"seed": args.seed} if args.seed is not None else {}))
    train_s, val_s = _load_data(args, doc, model.cfg.input_size, tcfg.seed)
    samples = val_s if args.split == "val" else train_s if args.split == "train" else train_s + val_s
    res = evaluate(model, samples, tcfg.loss, tcfg.metric, tcfg.eval_batch_size)
    result = {"split": args.split, "n": len(samples), "loss": res.loss,
              "soft_jaccard": res.soft_jaccard, "hard_jaccard": res.hard_jaccard}
    print(json.dumps(result, indent=2))
    if args.out is not None:
        out = _out_dir(args, doc, ".")
        (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return 0


def _overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grey input with the mask boundary drawn in a fixed colour; returns HxWx3 uint8."""
    grey = image.mean(axis=0)
    rgb = np.repeat((grey * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    m = mask.astype(bool)
    pad = np.pad(m, 1, mode="edge")
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    rgb[m & ~interior] = OVERLAY_COLOUR
    return rgb


def cmd_predict(args) -> int:
    from PIL import Image

    model, _ = _restore(args.checkpoint)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for raw in args.images:
        path = Path(raw)
        try:
            image = load_image(path, model.cfg.input_size)
        except SeeaError as exc:
            failures.append(str(exc))
            continue
        _, binary = predict(model, image)
        mask = binary[0].astype(bool)
        Image.fromarray((mask * 255).astype(np.uint8), "L").save(out / f"{path.stem}_mask.png")
        Image.fromarray(_overlay(image, mask), "RGB").save(out / f"{path.stem}_overlay.png")
        print(f"{path.name}: {int(mask.sum())} foreground pixels")
    if failures:
        print("prediction failed for:\n  " + "\n  ".join(failures), file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    doc = _read_config(args.config)
    tcfg = _train_config(args, doc)
    mcfg = _model_config(args, doc)
    archs = [resolve_arch(a) for a in args.archs.split(",")] if args.archs else list(ARCHS)
    epochs = [int(e) for e in args.at.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tcfg.seed]
    data_seed = args.data_seed if args.data_seed is not None else tcfg.seed
    args.data_seed = data_seed
    train_s, val_s = _load_data(args, doc, mcfg.input_size, data_seed)
    out = _out_dir(args, doc, "runs/compare")
    for seed in seeds:
        table = compare_models(archs, train_s, val_s, mcfg, replace(tcfg, seed=seed), epochs)
        name = "comparison.csv" if len(seeds) == 1 else f"comparison_seed{seed}.csv"
        (out / name).write_text(table.to_csv())
        print(f"seed {seed}")
        print(table.format())
    return 0


def cmd_params(args) -> int:
    doc = _read_config(args.config)
    if args.scan:
        out = _out_dir(args, doc, "runs/params")
        results = scan_published()
        lines = ["arch,target_total,total,delta_total,target_trainable,trainable,delta_trainable,"
                 "non_trainable,layout,in_channels,f_int_ratio,se_reduction,se_bias,se_stages,se_on_bottleneck"]
        for arch in ARCHS:
            for r in results[arch][: args.top]:
                c = r.config
                stages = "" if c.arch != "seea_unet" else "|".join(map(str, c.se_stages or ()))
                lines.append(",".join(str(v) for v in (
                    arch, r.target_total, r.counts.total, r.delta_total, r.target_trainable,
                    r.counts.trainable, r.delta_trainable, r.counts.non_trainable, c.layout,
                    c.in_channels, c.attention_f_int_ratio, c.se_reduction if c.arch == "seea_unet" else "",
                    c.se_bias if c.arch == "seea_unet" else "", stages,
                    c.se_on_bottleneck if c.arch == "seea_unet" else "")))
            best = results[arch][0]
            print(f"{arch:<20} target {best.target_total:>12,}  closest {best.counts.total:>12,}  "
                  f"delta {best.delta_total:+,}  ({best.config.layout}, in_channels={best.config.in_channels})")
        (out / "scan.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'scan.csv'}")
        return 0
    archs = list(ARCHS) if args.all else [resolve_arch(args.model or "seea_unet")]
    for arch in archs:
        ns = argparse.Namespace(**{**vars(args), "model": arch})
        cfg = _model_config(ns, doc, canonical=True)
        model = build_model(cfg)
        counts = count_parameters(model.params)
        if args.verbose:
            print(format_summary(summarize(model), counts))
        target = PUBLISHED_COUNTS[arch][0]
        print(f"{arch:<20} total {counts.total:>12,}  trainable {counts.trainable:>12,}  "
              f"non-trainable {counts.non_trainable:>8,}  (table: {target:,})")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.ops.split(",") if args.ops else list(gradcheck.CASE_NAMES)
    unknown = [n for n in names if n not in gradcheck.CASE_NAMES]
    if unknown:
        raise CommandError(f"unknown ops {unknown}; choose from {', '.join(gradcheck.CASE_NAMES)}")
    failed = []
    for name in names:
        r = gradcheck.run_case(name, seed=args.seed or 0)
        status = "ok" if r.passed else "FAIL"
        print(f"{name:<32} worst rel err {r.max_rel_error:.3e}  ({r.n_checked} entries)  {status}")
        if not r.passed:
            failed.append(f"{name} ({r.max_rel_error:.3e})")
    if failed:
        print(f"{len(failed)} op(s) exceed tolerance {gradcheck.TOLERANCE:g}: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    n = args.synth if args.synth is not None else 100
    if n < 1:
        raise CommandError(f"--synth needs a positive sample count, got {n}")
    size = args.size or 64
    seed = (args.seed or 0) + SYNTH_SEED_OFFSET
    samples, _ = synth_split(n, 0, (size, size), seed)
    root = write_dataset(samples, Path(args.out or "data/synth"))
    print(f"wrote {n} image/mask pairs under {root}")
    return 0


# -- parser --------------------------------------------------------------------------

def _common(p, data=True, training=True, model=True):
    p.add_argument("--config", help="YAML file with model/train/data sections")
    p.add_argument("--seed", type=int, help="master seed (init, shuffle and synthetic data streams)")
    p.add_argument("--out", help="output directory")
    if model:
        p.add_argument("--model", help=f"architecture: {', '.join(ARCHS)} (aliases: unet, attention, attres, seea)")
        p.add_argument("--size", type=int, help="input height and width H (square)")
        p.add_argument("--base-filters", dest="base_filters", type=int, help="filters of the first encoder stage")
        p.add_argument("--depth", type=int, help="number of poolings")
        p.add_argument("--se-reduction", dest="se_reduction", type=int, help="SE reduction ratio r")
        p.add_argument("--layout", choices=("compact", "reference"), help="block layout variant")
    if data:
        p.add_argument("--data", help="dataset root with images/ and masks/")
        p.add_argument("--synth", type=int, metavar="N", help="use N synthetic training samples (plus N//4 for validation)")
        p.add_argument("--data-seed", dest="data_seed", type=int, help="seed for the data split or synthetic set (default: --seed)")
    if training:
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--lr", type=float, help="Adam learning rate")
        p.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size")
        p.add_argument("--patience", type=int, help="early stopping patience in epochs")
        p.add_argument("--monitor", choices=("val_loss", "val_jaccard"), help="early stopping quantity")
        p.add_argument("--gamma", type=float, help="focal loss focusing parameter")
        p.add_argument("--alpha", type=float, help="focal loss weight")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seeaunet", description="SE-embedded attention UNet lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model; writes report.csv, best.ckpt, loss.png, jaccard.png")
    _common(p)
    p.add_argument("--no-timing", dest="no_timing", action="store_true",
                   help="write wall_seconds as 0 so reruns give byte-identical report.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="loss and Jaccard of a checkpoint on a dataset")
    _common(p, training=False, model=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--split", choices=("train", "val", "all"), default="val", help="which split to score")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write <stem>_mask.png and <stem>_overlay.png per image")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--out", help="output directory")
    p.add_argument("images", nargs="+", help="input image files")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="train several architectures identically and tabulate loss/Jaccard")
    _common(p)
    p.add_argument("--archs", help="comma-separated subset, e.g. unet,seea")
    p.add_argument("--at", default="3,5", help="epochs at which to report (default 3,5)")
    p.add_argument("--seeds", help="comma-separated seeds; one CSV per seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("params", help="parameter totals per architecture (canonical config by default)")
    _common(p, data=False, training=False)
    p.add_argument("--in-channels", dest="in_channels", type=int, help="input channels")
    p.add_argument("--all", action="store_true", help="all four architectures in table order")
    p.add_argument("--scan", action="store_true", help="search configs for the closest match to the table")
    p.add_argument("--top", type=int, default=10, help="candidates per arch written by --scan")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks per op and block")
    p.add_argument("--ops", help="comma-separated subset of checks")
    p.add_argument("--seed", type=int, help="input seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset in the images/ + masks/ layout")
    p.add_argument("--synth", type=int, metavar="N", help="number of pairs (default 100)")
    p.add_argument("--size", type=int, help="image height and width (default 64)")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--out", help="dataset root (default data/synth)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("SEEA_THREADS")
    if threads:
        try:
            kernels.set_num_threads(int(threads))
        except ValueError:
            print(f"error: SEEA_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SeeaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
