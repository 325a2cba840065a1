"""Training loop, evaluation, prediction and the architecture comparison harness."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as data_mod
from .autodiff import backward, no_grad
from .errors import ConfigError, TrainingError, ValidationError
from .models import ModelConfig, SegmentationNetwork, build_model, resolve_arch
from .objectives import FocalLossConfig, JaccardConfig, JaccardSums, binary_focal_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

REPORT_HEADER = ["epoch", "train_loss", "val_loss", "train_jaccard", "val_jaccard", "wall_seconds"]

# offsets that derive independent random streams from one master seed
INIT_SEED_OFFSET = 0
SHUFFLE_SEED_OFFSET = 1000
SYNTH_SEED_OFFSET = 2000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr: float = 0.01
    batch_size: int = 8
    seed: int = 0
    early_stop_patience: Optional[int] = None
    monitor: str = "val_loss"
    loss: FocalLossConfig = FocalLossConfig()
    metric: JaccardConfig = JaccardConfig()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    max_steps: Optional[int] = None
    eval_batch_size: int = 16

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            problems.append(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.monitor not in ("val_loss", "val_jaccard"):
            problems.append(f"monitor must be val_loss or val_jaccard, got {self.monitor!r}")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append(f"max_steps must be >= 1, got {self.max_steps}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = FocalLossConfig(**d["loss"])
        if isinstance(d.get("metric"), dict):
            d["metric"] = JaccardConfig(**d["metric"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown train field {k!r}" for k in sorted(unknown)])
        return cls(**d)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    soft_jaccard: float
    hard_jaccard: float

    def __iter__(self):
        return iter((self.loss, self.soft_jaccard, self.hard_jaccard))


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    train_jaccard: float
    val_jaccard: float
    wall_seconds: float
    train_jaccard_hard: float = float("nan")
    val_jaccard_hard: float = float("nan")


@dataclass
class TrainReport:
    model: str
    config: dict
    rows: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in self.rows:
            writer.writerow([r.epoch] + [f"{getattr(r, k):.6f}" for k in REPORT_HEADER[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def metrics_equal(self, other: "TrainReport") -> bool:
        """Bitwise equality of everything except wall-clock time."""

        def strip(rows):
            return [tuple(v for k, v in asdict(r).items() if k != "wall_seconds") for r in rows]

        return (
            strip(self.rows) == strip(other.rows)
            and self.step_losses == other.step_losses
            and self.best_epoch == other.best_epoch
        )


def evaluate(
    model: SegmentationNetwork,
    samples,
    loss_cfg: FocalLossConfig = FocalLossConfig(),
    metric_cfg: JaccardConfig = JaccardConfig(),
    batch_size: int = 16,
) -> EvalResult:
    """Mean focal loss and dataset-level soft / hard (0.5) Jaccard, batch norm in inference mode."""
    if len(samples) == 0:
        raise ValidationError("cannot evaluate on an empty sample set")
    soft, hard = JaccardSums(), JaccardSums()
    loss_sum, count = 0.0, 0
    threshold = metric_cfg.threshold if metric_cfg.threshold is not None else 0.5
    with no_grad():
        for x, y in data_mod.batches(samples, batch_size):
            pred = model(x, train=False)
            loss = binary_focal_loss(pred, y, loss_cfg)
            loss_sum += float(loss.item()) * y.size
            count += y.size
            soft.update(pred, y)
            hard.update(pred, y, threshold)
    return EvalResult(loss_sum / count, soft.value(metric_cfg.smooth), hard.value(metric_cfg.smooth))


def evaluate_predictions(preds, masks, loss_cfg=FocalLossConfig(), metric_cfg=JaccardConfig()) -> EvalResult:
    """Same metrics as :func:`evaluate` for precomputed probability maps."""
    preds = np.asarray(preds, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    loss = binary_focal_loss(preds, masks, loss_cfg).item()
    soft = JaccardSums().update(preds, masks).value(metric_cfg.smooth)
    hard = JaccardSums().update(preds, masks, 0.5).value(metric_cfg.smooth)
    return EvalResult(loss, soft, hard)


def predict(model: SegmentationNetwork, image) -> tuple[np.ndarray, np.ndarray]:
    """Soft and 0.5-binarised masks for one ``[C,H,W]`` image (or a ``[N,C,H,W]`` batch)."""
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with no_grad():
        soft = model(arr, train=False).data
    binary = (soft >= 0.5).astype(soft.dtype)
    return (soft[0], binary[0]) if single else (soft, binary)


def train(
    model: SegmentationNetwork,
    train_samples,
    val_samples,
    cfg: TrainConfig = TrainConfig(),
    stop_when: Optional[Callable[[EpochRow], bool]] = None,
):
    """Fit ``model`` with Adam on binary focal loss.

    Each epoch runs one shuffled pass of optimiser steps, then evaluates train
    and validation sets in inference mode. The parameters (including running
    statistics) of the best epoch by the monitored quantity are restored before
    returning. ``stop_when(row)`` returning true ends training after that epoch.
    Returns ``(params, report)``.
    """
    if len(train_samples) == 0:
        raise ValidationError("training set is empty")
    x0 = train_samples[0]
    if x0.mask.shape[1:] != x0.image.shape[1:]:
        raise ValidationError("mask and image sizes differ")
    params = model.params
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.adam_epsilon)
    report = TrainReport(model.cfg.arch, {"model": model.cfg.to_dict(), "train": cfg.to_dict()})
    shuffle_seed = cfg.seed + SHUFFLE_SEED_OFFSET
    best_score, best_state, bad_epochs, steps = None, None, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        for bi, (x, y) in enumerate(data_mod.batches(train_samples, cfg.batch_size, shuffle_seed, epoch)):
            params.zero_grads()
            pred = model(x, train=True)
            loss = binary_focal_loss(pred, y, cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss)
            adam_step(params, state)
            report.step_losses.append(value)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        tr = evaluate(model, train_samples, cfg.loss, cfg.metric, cfg.eval_batch_size)
        va = evaluate(model, val_samples, cfg.loss, cfg.metric, cfg.eval_batch_size) if len(val_samples) else tr
        row = EpochRow(epoch, tr.loss, va.loss, tr.soft_jaccard, va.soft_jaccard, time.perf_counter() - t0,
                       tr.hard_jaccard, va.hard_jaccard)
        report.rows.append(row)
        log.info("%s epoch %d: loss %.5f/%.5f jaccard %.4f/%.4f", report.model, epoch,
                 row.train_loss, row.val_loss, row.train_jaccard, row.val_jaccard)
        score = va.loss if cfg.monitor == "val_loss" else -va.soft_jaccard
        if best_score is None or score < best_score:
            best_score, best_state, bad_epochs = score, params.state_dict(), 0
            report.best_epoch = epoch
        else:
            bad_epochs += 1
            if cfg.early_stop_patience is not None and bad_epochs >= cfg.early_stop_patience:
                report.stopped_early = epoch < cfg.epochs
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        if stop_when is not None and stop_when(row):
            break
    if best_state is not None:
        params.load_state_dict(best_state)
    return params, report


# -- comparison harness --------------------------------------------------------

@dataclass
class ComparisonRow:
    model: str
    values: dict  # column -> float or None

    def get(self, column: str):
        return self.values.get(column)


@dataclass
class ComparisonTable:
    epochs: tuple
    rows: list
    reports: dict
    config: dict

    @property
    def columns(self) -> list[str]:
        cols = []
        for e in self.epochs:
            cols += [f"train_jaccard@{e}", f"val_jaccard@{e}"]
        for e in self.epochs:
            cols += [f"train_loss@{e}", f"val_loss@{e}"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model"] + self.columns)
        for row in self.rows:
            cells = []
            for c in self.columns:
                v = row.get(c)
                cells.append("-" if v is None else f"{v:.6f}")
            writer.writerow([row.model] + cells)
        return buf.getvalue()

    def format(self) -> str:
        cols = self.columns
        width = max(len(c) for c in cols)
        lines = [f"{'model':<20}" + "".join(f"{c:>{width + 2}}" for c in cols)]
        for row in self.rows:
            cells = "".join(
                f"{'-' if row.get(c) is None else format(row.get(c), '.4f'):>{width + 2}}" for c in cols
            )
            lines.append(f"{row.model:<20}" + cells)
        return "\n".join(lines)


def compare_models(
    archs: Sequence[str],
    train_samples,
    val_samples,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    epochs: Sequence[int] = (3, 5),
) -> ComparisonTable:
    """Train every architecture with identical data, config and seed.

    Each model is trained for ``max(epochs)`` epochs without early stopping and
    the per-epoch metrics are read off at each requested epoch.
    """
    epochs = tuple(sorted(set(int(e) for e in epochs)))
    if not epochs or epochs[0] < 1:
        raise ConfigError(f"epochs must be positive, got {epochs}")
    run_cfg = replace(train_cfg, epochs=epochs[-1], early_stop_patience=None)
    rows, reports = [], {}
    for arch in archs:
        arch = resolve_arch(arch)
        cfg = replace(model_cfg, arch=arch)
        model = build_model(cfg, seed=run_cfg.seed + INIT_SEED_OFFSET)
        _, report = train(model, train_samples, val_samples, run_cfg)
        by_epoch = {r.epoch: r for r in report.rows}
        values = {}
        for e in epochs:
            r = by_epoch.get(e)
            values[f"train_jaccard@{e}"] = None if r is None else r.train_jaccard
            values[f"val_jaccard@{e}"] = None if r is None else r.val_jaccard
            values[f"train_loss@{e}"] = None if r is None else r.train_loss
            values[f"val_loss@{e}"] = None if r is None else r.val_loss
        rows.append(ComparisonRow(arch, values))
        reports[arch] = report
    snapshot = {"model": model_cfg.to_dict(), "train": run_cfg.to_dict(), "epochs": list(epochs)}
    return ComparisonTable(epochs, rows, reports, snapshot)


def save_curves(report: TrainReport, out_dir) -> tuple[Path, Path]:
    """Write ``loss.png`` and ``jaccard.png`` (train vs validation per epoch)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in report.rows]
    paths = []
    for key, label in (("loss", "focal loss"), ("jaccard", "soft Jaccard")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, [getattr(r, f"train_{key}") for r in report.rows], marker="o", label="train")
        ax.plot(epochs, [getattr(r, f"val_{key}") for r in report.rows], marker="o", label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.set_title(f"{report.model}: {label}")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{key}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths[0], paths[1]
