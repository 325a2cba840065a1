"""Binary focal loss and the Jaccard (IoU) coefficient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor, make_node
from .errors import ConfigError, ShapeError, ValidationError


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    epsilon_clip: float = 1e-7
    reduction: str = "mean"

    def __post_init__(self):
        problems = []
        if self.gamma < 0:
            problems.append(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            problems.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.epsilon_clip < 0.5:
            problems.append(f"epsilon_clip must lie in (0, 0.5), got {self.epsilon_clip}")
        if self.reduction != "mean":
            problems.append(f"only 'mean' reduction is supported, got {self.reduction!r}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class JaccardConfig:
    smooth: float = 1e-5
    threshold: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.smooth <= 0:
            problems.append(f"smooth must be > 0, got {self.smooth}")
        if self.threshold is not None and not 0 < self.threshold < 1:
            problems.append(f"threshold must lie in (0, 1), got {self.threshold}")
        if problems:
            raise ConfigError(problems)


def check_binary_target(target: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Return ``target`` as exact {0, 1} values, or raise if any entry is off by more than ``tol``."""
    target = np.asarray(target)
    off = np.minimum(np.abs(target), np.abs(target - 1)) > tol
    if np.any(off):
        bad = target[off].reshape(-1)[:5]
        raise ValidationError(f"{int(off.sum())} target values are not binary, e.g. {bad.tolist()}")
    return (target > 0.5).astype(target.dtype if target.dtype.kind == "f" else np.float64)


def binary_focal_loss(pred: Tensor, target, cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)``, differentiable in ``pred``.

    ``p_t`` is ``pred`` where the target is 1 and ``1 - pred`` where it is 0.
    ``pred`` is clipped to ``[eps, 1 - eps]`` first; clipped entries get zero gradient.
    """
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ShapeError(f"focal loss: prediction {pred.shape} vs target {t.shape}")
    t = check_binary_target(t).astype(pred.dtype) > 0.5
    eps, gamma, alpha = cfg.epsilon_clip, cfg.gamma, cfg.alpha
    p = np.clip(pred.data, eps, 1 - eps)
    pt = np.where(t, p, 1 - p)
    one_minus = 1 - pt
    log_pt = np.log(pt)
    weight = one_minus ** gamma
    n = pred.size
    value = np.asarray(-alpha * (weight * log_pt).mean(), dtype=pred.dtype).reshape(1)

    def backward(g):
        if gamma == 0:
            dweight = np.zeros_like(pt)
        else:
            dweight = -gamma * one_minus ** (gamma - 1)
        # d/dpt of -alpha * w(pt) * log(pt)
        dpt = -alpha * (dweight * log_pt + weight / pt)
        inside = (pred.data >= eps) & (pred.data <= 1 - eps)
        dp = np.where(t, dpt, -dpt) * inside
        return ((g.reshape(-1)[0] / n) * dp.astype(pred.dtype),)

    return make_node(value, (pred,), "binary_focal_loss", backward)


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


@dataclass
class JaccardSums:
    """Running sums for a dataset-level Jaccard coefficient."""

    intersection: float = 0.0
    pred_sum: float = 0.0
    target_sum: float = 0.0

    def update(self, pred, target, threshold: Optional[float] = None) -> "JaccardSums":
        p, t = _as_array(pred), _as_array(target)
        if threshold is not None:
            p = (p >= threshold).astype(np.float64)
            t = (t >= threshold).astype(np.float64)
        self.intersection += float((p * t).sum())
        self.pred_sum += float(p.sum())
        self.target_sum += float(t.sum())
        return self

    def value(self, smooth: float = 1e-5) -> float:
        union = self.pred_sum + self.target_sum - self.intersection
        return (self.intersection + smooth) / (union + smooth)


def jaccard(pred, target, cfg: JaccardConfig = JaccardConfig()) -> float:
    """Soft (or thresholded) intersection over union of two masks."""
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"jaccard: prediction {p.shape} vs target {t.shape}")
    return JaccardSums().update(p, t, cfg.threshold).value(cfg.smooth)
