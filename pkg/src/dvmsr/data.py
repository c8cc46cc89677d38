"""Training pairs: aligned patch sampling, augmentation, dataset ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .imaging import bicubic_resize, quantize_8bit, read_png

__all__ = [
    "Pair",
    "Dataset",
    "DatasetError",
    "UndersizedImage",
    "crop_to_multiple",
    "degrade",
    "augment",
    "draw_crop",
    "sample_training_pair",
    "sample_batch",
    "load_dataset",
    "dataset_layout",
    "synthetic_images",
]

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class UndersizedImage(ValueError):
    """The image cannot hold a patch of the requested size; callers skip it."""


@dataclass
class Pair:
    name: str
    lr: np.ndarray
    hr: np.ndarray


@dataclass
class Dataset:
    pairs: list[Pair]
    scale: int
    unmatched: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def __getitem__(self, i: int) -> Pair:
        return self.pairs[i]


def crop_to_multiple(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[:2]
    return hr[: h - h % scale, : w - w % scale]


def degrade(hr: np.ndarray, scale: int, quantize: bool = True) -> np.ndarray:
    """Bicubic LR counterpart of an (already cropped) HR array."""
    lr = bicubic_resize(hr, output_shape=(hr.shape[0] // scale, hr.shape[1] // scale))
    if quantize:
        return quantize_8bit(lr) / 255.0
    return np.clip(lr, 0.0, 1.0)


def augment(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Horizontal flip (optional) followed by ``k`` quarter-turn rotations."""
    if flip:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(np.rot90(arr, k % 4, axes=(0, 1)))


def draw_crop(lr_hw: tuple[int, int], patch: int, scale: int, rng) -> tuple[int, int]:
    """Random LR-grid origin of a patch whose HR extent is ``patch``."""
    lp = patch // scale
    h, w = lr_hw
    if h < lp or w < lp:
        raise UndersizedImage(f"LR {h}x{w} smaller than {lp}x{lp} patch")
    return int(rng.integers(0, h - lp + 1)), int(rng.integers(0, w - lp + 1))


def sample_training_pair(
    hr: np.ndarray, lr: np.ndarray, scale: int, patch: int, rng
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (lr_patch, hr_patch) with one shared rotation/flip draw."""
    if patch % scale:
        raise ValueError(f"patch {patch} is not divisible by scale {scale}")
    if hr.shape[0] < patch or hr.shape[1] < patch:
        raise UndersizedImage(f"HR {hr.shape[0]}x{hr.shape[1]} smaller than patch {patch}")
    if lr.shape[0] * scale > hr.shape[0] or lr.shape[1] * scale > hr.shape[1]:
        raise DatasetError(f"LR {lr.shape[:2]} does not match HR {hr.shape[:2]} at x{scale}")
    top, left = draw_crop(lr.shape[:2], patch, scale, rng)
    lp = patch // scale
    lr_p = lr[top : top + lp, left : left + lp]
    hr_p = hr[top * scale : top * scale + patch, left * scale : left * scale + patch]
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    return augment(lr_p, k, flip), augment(hr_p, k, flip)


def sample_batch(
    pairs: Sequence[Pair], batch: int, scale: int, patch: int, rng
) -> tuple[np.ndarray, np.ndarray]:
    """NCHW (lr, hr) batch; undersized images are skipped and logged."""
    lrs, hrs = [], []
    attempts = 0
    while len(lrs) < batch:
        attempts += 1
        if attempts > 50 * batch:
            raise DatasetError(f"no image in the dataset holds a {patch}px patch")
        pair = pairs[int(rng.integers(0, len(pairs)))]
        try:
            lr_p, hr_p = sample_training_pair(pair.hr, pair.lr, scale, patch, rng)
        except UndersizedImage as exc:
            log.warning("skipping %s: %s", pair.name, exc)
            continue
        lrs.append(lr_p)
        hrs.append(hr_p)
    to_nchw = lambda xs: np.stack(xs).transpose(0, 3, 1, 2).copy()
    return to_nchw(lrs), to_nchw(hrs)


def dataset_layout(root: Path | str, scale: int) -> tuple[Path, Path | None]:
    """``<root>/HR`` and, if present, ``<root>/LR_bicubic/X<scale>``."""
    root = Path(root)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        hr_dir = root
    lr_dir = root / "LR_bicubic" / f"X{scale}"
    return hr_dir, lr_dir if lr_dir.is_dir() else None


def _lr_stem(stem: str, scale: int) -> str:
    suffix = f"x{scale}"
    return stem[: -len(suffix)] if stem.lower().endswith(suffix) else stem


def load_dataset(
    dir_hr: Path | str, dir_lr: Path | str | None, scale: int
) -> Dataset:
    """Pair HR images with LR images by file stem (``name`` or ``namex<scale>``).

    Without an LR directory the LR images are synthesized by bicubic degradation.
    HR images are first cropped to multiples of ``scale``.
    """
    dir_hr = Path(dir_hr)
    if not dir_hr.is_dir():
        raise DatasetError(f"HR directory {dir_hr} does not exist")
    hr_files = sorted(dir_hr.glob("*.png"))
    lr_files = {}
    if dir_lr is not None:
        dir_lr = Path(dir_lr)
        if not dir_lr.is_dir():
            raise DatasetError(f"LR directory {dir_lr} does not exist")
        lr_files = {_lr_stem(p.stem, scale): p for p in sorted(dir_lr.glob("*.png"))}
    pairs, unmatched = [], []
    for path in hr_files:
        hr = crop_to_multiple(read_png(path).to_rgb().pixels, scale)
        if hr.shape[0] < scale or hr.shape[1] < scale:
            unmatched.append(path.stem)
            continue
        if dir_lr is None:
            lr = degrade(hr, scale)
        elif path.stem in lr_files:
            lr = read_png(lr_files.pop(path.stem)).to_rgb().pixels
            want = (hr.shape[0] // scale, hr.shape[1] // scale)
            if lr.shape[:2] != want:
                raise DatasetError(
                    f"{path.stem}: LR is {lr.shape[0]}x{lr.shape[1]}, expected "
                    f"{want[0]}x{want[1]} for x{scale}"
                )
        else:
            unmatched.append(path.stem)
            continue
        pairs.append(Pair(path.stem, lr, hr))
    unmatched.extend(f"{stem} (LR only)" for stem in lr_files)
    for name in unmatched:
        log.warning("unmatched image: %s", name)
    if not pairs:
        raise DatasetError(f"no image pairs found under {dir_hr}")
    return Dataset(pairs, scale, unmatched)


def synthetic_images(n: int, size: int, rng) -> list[np.ndarray]:
    """Smooth textured RGB images: blurred noise plus oriented gratings and edges."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = []
    for _ in range(n):
        noise = rng.uniform(size=(size // 4 + 4, size // 4 + 4, 3))
        base = bicubic_resize(noise, output_shape=(size + 16, size + 16))[8:-8, 8:-8]
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 8.0)
        grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        edge = (xx * np.cos(theta + 1.0) + yy * np.sin(theta + 1.0) > rng.uniform(0.3, 0.9)).astype(float)
        tint = rng.uniform(0.2, 1.0, size=3)
        img = 0.5 * base + 0.3 * grating[..., None] * tint + 0.2 * edge[..., None]
        images.append(np.clip(img, 0.0, 1.0))
    return images
