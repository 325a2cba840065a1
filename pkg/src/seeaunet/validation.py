"""Input checks shared by the estimator, the CLI and the training loop."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def check_images(X, channels: int = 3) -> np.ndarray:
    """Return ``X`` as a contiguous float32 ``[N, C, H, W]`` array with values in [0, 1].

    A single image ``[C, H, W]`` is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValidationError(f"images must be [N, C, H, W], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError("images: empty batch")
    if X.shape[1] != channels:
        raise ValidationError(f"images must have {channels} channels, got {X.shape[1]}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValidationError(f"images must be numeric, got dtype {X.dtype}")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise ValidationError("images contain NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValidationError(f"images must lie in [0, 1], got range [{X.min():.4g}, {X.max():.4g}]")
    return X


def check_masks(y, n: int | None = None, spatial: tuple | None = None) -> np.ndarray:
    """Return binary masks as float32 ``[N, 1, H, W]``; accepts ``[N, H, W]`` too."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValidationError(f"masks must be [N, 1, H, W] or [N, H, W], got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ValidationError(f"got {y.shape[0]} masks for {n} images")
    if spatial is not None and y.shape[2:] != tuple(spatial):
        raise ValidationError(f"mask size {y.shape[2:]} differs from image size {tuple(spatial)}")
    bad = ~np.isin(y, (0, 1))
    if bad.any():
        raise ValidationError(f"masks must be binary; {int(bad.sum())} entries are neither 0 nor 1")
    return np.ascontiguousarray(y, dtype=np.float32)


def check_divisible(spatial, depth: int) -> None:
    h, w = spatial
    step = 2**depth
    if h % step or w % step:
        raise ValidationError(f"image size {h}x{w} must be divisible by {step} for depth {depth}")
