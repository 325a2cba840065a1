"""Image/mask ingestion, synthetic data, splitting and batching.

On-disk layout::

    <root>/images/<stem>.png|jpg|jpeg
    <root>/masks/<stem>.png|jpg|jpeg

Images are decoded as RGB, resized bilinearly and scaled to [0, 1]. Masks are
decoded as greyscale, resized with nearest neighbour and binarised at 127.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, ValidationError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127


@dataclass
class SegmentationSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] float32 in {0, 1}
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValidationError(f"sample {self.id}: bad shapes {self.image.shape} / {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValidationError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class DatasetManifest:
    root: str
    pairs: dict  # id -> (image path, mask path)
    train_ids: list
    val_ids: list
    seed: int
    target_size: tuple

    def to_json(self) -> str:
        return json.dumps(
            {
                "root": self.root,
                "seed": self.seed,
                "target_size": list(self.target_size),
                "pairs": {k: list(v) for k, v in self.pairs.items()},
                "split": {"train": self.train_ids, "val": self.val_ids},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            root=d["root"],
            pairs={k: tuple(v) for k, v in d["pairs"].items()},
            train_ids=list(d["split"]["train"]),
            val_ids=list(d["split"]["val"]),
            seed=d["seed"],
            target_size=tuple(d["target_size"]),
        )


@dataclass
class SplitDataset:
    manifest: DatasetManifest
    train: list
    val: list


def _index(folder: Path) -> tuple[dict, list]:
    found, dupes = {}, []
    for path in sorted(folder.iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
            if path.stem in found:
                dupes.append(path.stem)
            found[path.stem] = path
    return found, dupes


def pair_files(root) -> dict:
    """Map each stem to its (image, mask) paths; aggregate every pairing problem."""
    root = Path(root)
    images_dir, masks_dir = root / "images", root / "masks"
    missing = [str(d) for d in (images_dir, masks_dir) if not d.is_dir()]
    if missing:
        raise DatasetError(f"dataset root {root} lacks directories: {', '.join(missing)}")
    images, img_dupes = _index(images_dir)
    masks, mask_dupes = _index(masks_dir)
    problems = [f"image without mask: {images[s].name}" for s in sorted(set(images) - set(masks))]
    problems += [f"mask without image: {masks[s].name}" for s in sorted(set(masks) - set(images))]
    problems += [f"several images share stem {s!r}" for s in img_dupes]
    problems += [f"several masks share stem {s!r}" for s in mask_dupes]
    if problems:
        raise DatasetError("unpaired dataset files:\n  " + "\n  ".join(problems))
    if not images:
        raise DatasetError(f"no images found under {images_dir}")
    return {s: (str(images[s]), str(masks[s])) for s in sorted(images)}


def split_ids(ids: Sequence[str], split_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split; ``ids`` are sorted first so input order is irrelevant."""
    if not 0 < split_fraction <= 1:
        raise ValidationError(f"split_fraction must lie in (0, 1], got {split_fraction}")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = int(round(split_fraction * len(ordered)))
    train = sorted(ordered[i] for i in perm[:n_train])
    val = sorted(ordered[i] for i in perm[n_train:])
    return train, val


def load_image(path, target_size) -> np.ndarray:
    h, w = target_size
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path, target_size) -> np.ndarray:
    h, w = target_size
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((w, h), Image.NEAREST)
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode mask {path}: {exc}") from exc
    return (arr > MASK_THRESHOLD).astype(np.float32)[None]


def _load_pair(item, target_size) -> SegmentationSample:
    stem, (img_path, mask_path) = item
    return SegmentationSample(load_image(img_path, target_size), load_mask(mask_path, target_size), stem)


def load_samples(pairs: dict, ids: Sequence[str], target_size, workers: int = 4) -> list:
    """Decode the given ids; order of the result follows ``ids`` regardless of worker timing."""
    items = [(i, pairs[i]) for i in ids]
    if workers <= 1 or len(items) < 2:
        return [_load_pair(it, target_size) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: _load_pair(it, target_size), items))


def load_dataset(root, target_size=(256, 256), split_fraction: float = 0.8, seed: int = 0, workers: int = 4) -> SplitDataset:
    target_size = tuple(int(v) for v in target_size)
    pairs = pair_files(root)
    train_ids, val_ids = split_ids(list(pairs), split_fraction, seed)
    manifest = DatasetManifest(str(root), pairs, train_ids, val_ids, seed, target_size)
    return SplitDataset(
        manifest,
        load_samples(pairs, train_ids, target_size, workers),
        load_samples(pairs, val_ids, target_size, workers),
    )


# -- synthetic data ----------------------------------------------------------------

def ellipse_mask(shape, cy, cx, a, b, theta) -> np.ndarray:
    """Boolean mask of pixel centres (integer coordinates) inside a rotated ellipse."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def synth_sample(rng: np.random.Generator, size, sample_id: str, empty_fraction: float = 0.25) -> SegmentationSample:
    h, w = size
    n_lesions = 0 if rng.random() < empty_fraction else int(rng.integers(1, 4))
    base = rng.uniform(0.15, 0.35)
    tint = rng.uniform(0.8, 1.2, size=3)
    image = base * tint[:, None, None] + rng.normal(0.0, 0.06, size=(3, h, w))
    mask = np.zeros((h, w), bool)
    ellipses = []
    lo, hi = 0.06 * min(h, w), 0.2 * min(h, w)
    for _ in range(n_lesions):
        a, b = rng.uniform(lo, hi, size=2)
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        theta = rng.uniform(0.0, math.pi)
        inside = ellipse_mask((h, w), cy, cx, a, b, theta)
        colour = rng.uniform(0.35, 0.6) * np.array([1.0, rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.9)])
        image += colour[:, None, None] * inside
        mask |= inside
        ellipses.append((float(cy), float(cx), float(a), float(b), float(theta)))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegmentationSample(image, mask.astype(np.float32)[None], sample_id, {"ellipses": ellipses})


def synth_dataset(n: int, size=(64, 64), seed: int = 0, empty_fraction: float = 0.25) -> list:
    """``n`` noisy images with 0-3 bright ellipses; masks are the exact ellipse interiors."""
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, tuple(size), f"synth_{i:05d}", empty_fraction) for i in range(n)]


def synth_split(n_train: int, n_val: int, size=(64, 64), seed: int = 0) -> tuple[list, list]:
    """Independent train/val synthetic sets (the val stream uses ``seed + 1``)."""
    return synth_dataset(n_train, size, seed), synth_dataset(n_val, size, seed + 1)


def write_dataset(samples, root) -> Path:
    """Write samples as PNG pairs following the directory contract."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask[0] * 255).astype(np.uint8), "L").save(root / "masks" / f"{s.id}.png")
    return root


# -- batching ------------------------------------------------------------------------

def batches(samples, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0) -> Iterator[tuple]:
    """Yield ``(images[N,3,H,W], masks[N,1,H,W])`` float32 arrays; the last batch may be short.

    With ``shuffle_seed`` set, the order is a permutation drawn from
    ``(shuffle_seed, epoch)``, so every epoch is reproducible on its own.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield (
            np.stack([s.image for s in chunk]).astype(np.float32, copy=False),
            np.stack([s.mask for s in chunk]).astype(np.float32, copy=False),
        )
