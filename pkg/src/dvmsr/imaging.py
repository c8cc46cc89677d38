"""Images, PNG I/O, MATLAB-convention bicubic resizing and luma conversion.

Arrays are laid out (H, W, C) with float64 values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "Image",
    "ImageError",
    "read_png",
    "write_png",
    "quantize_8bit",
    "cubic_kernel",
    "resize_weights",
    "bicubic_resize",
    "rgb_to_y",
    "Y_COEFFS",
]

Y_COEFFS = (65.481, 128.553, 24.966)


class ImageError(ValueError):
    """Raised for malformed images and impossible resize requests."""


@dataclass
class Image:
    """An image with values clamped to [0, 1] and its source bit depth."""

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageError(f"expected (H, W, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError(f"empty image of shape {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_rgb(self) -> "Image":
        if self.channels == 3:
            return self
        return Image(np.repeat(self.pixels, 3, axis=2), self.bit_depth)

    def to_uint8(self) -> np.ndarray:
        return quantize_8bit(self.pixels).astype(np.uint8)


ArrayOrImage = Union[np.ndarray, Image]


def _pixels(img: ArrayOrImage) -> np.ndarray:
    if isinstance(img, Image):
        return img.pixels
    a = np.asarray(img, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def _like(src: ArrayOrImage, pixels: np.ndarray) -> ArrayOrImage:
    if isinstance(src, Image):
        return Image(pixels, src.bit_depth)
    return pixels


def quantize_8bit(pixels: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level and return values on the 0..255 scale."""
    return np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255)


def read_png(path: Union[str, Path]) -> Image:
    with PILImage.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            raw = np.asarray(im, dtype=np.float64)
            return Image(raw / 65535.0, bit_depth=16)
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "LA") else "RGB")
        raw = np.asarray(im, dtype=np.float64)
    return Image(raw / 255.0, bit_depth=8)


def write_png(img: ArrayOrImage, path: Union[str, Path]) -> None:
    """Write an 8-bit PNG; single-channel images are stored as grayscale."""
    q = quantize_8bit(_pixels(img)).astype(np.uint8)
    if q.shape[2] == 1:
        pil = PILImage.fromarray(q[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(q, mode="RGB")
    pil.save(path, format="PNG", optimize=False)


# -- bicubic resizing ---------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _edge_index(idx: np.ndarray, n: int, edge: str) -> np.ndarray:
    if edge == "symmetric":
        # 0..n-1, n-1..0 repeated: the edge sample is mirrored with itself
        period = np.concatenate([np.arange(n), np.arange(n - 1, -1, -1)])
        return period[np.mod(idx, 2 * n)]
    if edge == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = np.concatenate([np.arange(n), np.arange(n - 2, 0, -1)])
        return period[np.mod(idx, 2 * n - 2)]
    raise ImageError(f"unknown edge mode {edge!r}")


def resize_weights(
    n_in: int,
    n_out: int,
    scale: float,
    antialias: bool = True,
    edge: str = "symmetric",
    a: float = -0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-output contribution indices and weights along one axis.

    Returns ``(indices, weights)`` of shape (n_out, taps); each weight row sums to 1.
    Output sample ``j`` (0-based) sits at input coordinate ``(j + 0.5) / scale - 0.5``.
    """
    if n_out < 1 or n_in < 1:
        raise ImageError(f"resize to an empty axis ({n_in} -> {n_out})")
    shrink = antialias and scale < 1
    width = 4.0 / scale if shrink else 4.0
    centre = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centre - width / 2.0).astype(np.int64)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centre[:, None] - idx
    if shrink:
        w = scale * cubic_kernel(scale * dist, a)
    else:
        w = cubic_kernel(dist, a)
    w = w / w.sum(axis=1, keepdims=True)
    keep = np.any(w != 0, axis=0)
    return _edge_index(idx[:, keep], n_in, edge), w[:, keep]


def _resize_axis(px: np.ndarray, axis: int, n_out: int, scale: float, antialias, edge):
    idx, w = resize_weights(px.shape[axis], n_out, scale, antialias, edge)
    moved = np.moveaxis(px, axis, 0)
    out = np.einsum("ot,ot...->o...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def _output_extent(n: int, scale: Fraction) -> int:
    return math.ceil(n * scale)


def bicubic_resize(
    img: ArrayOrImage,
    scale: Union[float, Fraction, int, None] = None,
    output_shape: tuple[int, int] | None = None,
    antialias: bool = True,
    edge: str = "symmetric",
) -> ArrayOrImage:
    """Resize like MATLAB ``imresize(..., 'bicubic')``.

    Either ``scale`` (applied to both axes, output extent ``ceil(n * scale)``) or
    ``output_shape`` must be given.  Downscaling widens the kernel by ``1/scale``.
    Returned pixels are not clamped or quantized when an array is passed in.
    """
    px = _pixels(img)
    h, w = px.shape[:2]
    if output_shape is None:
        if scale is None:
            raise ImageError("bicubic_resize needs scale or output_shape")
        s = Fraction(scale).limit_denominator(10**6)
        if s <= 0:
            raise ImageError(f"scale must be positive, got {scale}")
        out_h, out_w = _output_extent(h, s), _output_extent(w, s)
        scales = (float(s), float(s))
    else:
        out_h, out_w = output_shape
        if out_h < 1 or out_w < 1:
            raise ImageError(f"empty output shape {output_shape}")
        scales = (out_h / h, out_w / w)
    if out_h < 1 or out_w < 1:
        raise ImageError(f"resize of {h}x{w} by {scale} is empty")
    # smaller scale first, ties resolve to rows
    order = sorted((0, 1), key=lambda ax: scales[ax])
    out = px
    for ax in order:
        out = _resize_axis(out, ax, (out_h, out_w)[ax], scales[ax], antialias, edge)
    if isinstance(img, Image):
        return Image(out, img.bit_depth)
    return out


def rgb_to_y(img: ArrayOrImage) -> ArrayOrImage:
    """BT.601 limited-range luma on [0, 1]; single-channel input passes through."""
    px = _pixels(img)
    if px.shape[2] == 1:
        return img
    r, g, b = Y_COEFFS
    y = (r * px[..., 0] + g * px[..., 1] + b * px[..., 2] + 16.0) / 255.0
    return _like(img, y[:, :, None])
