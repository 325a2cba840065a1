"""scikit-learn style wrapper around model construction and training."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .data import SegmentationSample
from .models import ModelConfig, build_model, resolve_arch
from .objectives import FocalLossConfig, JaccardConfig, JaccardSums
from .training import INIT_SEED_OFFSET, TrainConfig, evaluate, predict, train
from .validation import check_images, check_masks


def _samples(X, y, prefix):
    return [SegmentationSample(X[i], y[i], f"{prefix}{i}") for i in range(len(X))]


class SegmentationEstimator(BaseEstimator):
    """Binary segmentation network with a fit/predict interface.

    ``X`` is ``[N, 3, H, W]`` in [0, 1]; ``y`` is ``[N, 1, H, W]`` or ``[N, H, W]``
    with values in {0, 1}. ``predict`` returns binary masks, ``predict_proba``
    the sigmoid output, ``score`` the dataset-level hard Jaccard.
    """

    def __init__(
        self,
        arch: str = "seea_unet",
        base_filters: int = 16,
        depth: int = 3,
        se_reduction: int = 8,
        layout: str = "compact",
        epochs: int = 3,
        lr: float = 0.01,
        batch_size: int = 8,
        early_stop_patience: Optional[int] = None,
        gamma: float = 2.0,
        alpha: float = 0.25,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.arch = arch
        self.base_filters = base_filters
        self.depth = depth
        self.se_reduction = se_reduction
        self.layout = layout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.early_stop_patience = early_stop_patience
        self.gamma = gamma
        self.alpha = alpha
        self.threshold = threshold
        self.seed = seed

    def _model_config(self, spatial) -> ModelConfig:
        return ModelConfig(
            arch=resolve_arch(self.arch),
            input_size=tuple(spatial),
            base_filters=self.base_filters,
            depth=self.depth,
            se_reduction=self.se_reduction,
            layout=self.layout,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            early_stop_patience=self.early_stop_patience,
            loss=FocalLossConfig(gamma=self.gamma, alpha=self.alpha),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, n=len(X), spatial=X.shape[2:])
        val = []
        if X_val is not None:
            X_val = check_images(X_val)
            val = _samples(X_val, check_masks(y_val, n=len(X_val), spatial=X.shape[2:]), "val")
        cfg = self._model_config(X.shape[2:])
        tcfg = self._train_config()
        model = build_model(cfg, seed=self.seed + INIT_SEED_OFFSET)
        _, report = train(model, _samples(X, y, "train"), val, tcfg)
        self.model_ = model
        self.report_ = report
        self.input_size_ = tuple(X.shape[2:])
        return self

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        if tuple(X.shape[2:]) != self.input_size_:
            raise ValueError(f"fitted on {self.input_size_} images, got {tuple(X.shape[2:])}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_input(X)
        step = max(1, self.batch_size)
        return np.concatenate([predict(self.model_, X[i:i + step])[0] for i in range(0, len(X), step)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        X = self._check_input(X)
        y = check_masks(y, n=len(X), spatial=X.shape[2:])
        return JaccardSums().update(self.predict_proba(X), y, self.threshold).value()

    def evaluate(self, X, y):
        """Focal loss, soft Jaccard and hard Jaccard in inference mode."""
        X = self._check_input(X)
        y = check_masks(y, n=len(X), spatial=X.shape[2:])
        return evaluate(self.model_, _samples(X, y, "eval"), self._train_config().loss,
                        JaccardConfig(), self.batch_size)

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_.params, path,
                               {"model": self.model_.cfg.to_dict(), "estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "SegmentationEstimator":
        store, config = load_checkpoint(path)
        est = cls(**config.get("estimator", {}))
        cfg = ModelConfig.from_dict(config["model"])
        est.model_ = build_model(cfg, seed=est.seed)
        restore_into(est.model_.params, store)
        est.input_size_ = cfg.input_size
        est.report_ = None
        return est
