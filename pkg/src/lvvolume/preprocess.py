"""Spacing and intensity normalization, cropping, resizing, augmentation.

All resampling is bilinear with the half-pixel convention: destination pixel
``i`` samples the source at ``(i + 0.5) * n_src / n_dst - 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

TARGET_SPACING_MM = 1.4


@dataclass(frozen=True)
class NormalizedImage:
    pixels: np.ndarray
    spacing_mm: float | None = None
    # destination pixels per source pixel along (rows, cols)
    scale: tuple[float, float] = (1.0, 1.0)
    degenerate: bool = False

    def to_resampled(self, row, col) -> tuple[float, float]:
        """Map source pixel coordinates into this image's grid."""
        return (row + 0.5) * self.scale[0] - 0.5, (col + 0.5) * self.scale[1] - 0.5

    def to_source(self, row, col) -> tuple[float, float]:
        return (row + 0.5) / self.scale[0] - 0.5, (col + 0.5) / self.scale[1] - 0.5


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, NormalizedImage) else img, dtype=np.float64)


def physical_shape(shape, spacing, target=TARGET_SPACING_MM) -> tuple[int, int]:
    """Grid size after resampling to ``target`` mm/px: round((PS / target) * n)."""
    return (
        max(1, int(np.floor(spacing[0] / target * shape[0] + 0.5))),
        max(1, int(np.floor(spacing[1] / target * shape[1] + 0.5))),
    )


def _bilinear(src: np.ndarray, out_shape, mode="nearest") -> np.ndarray:
    h, w = src.shape
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return src.copy()
    r = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    c = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return ndimage.map_coordinates(src, [rr, cc], order=1, mode=mode)


def resample_to_physical(img, spacing) -> NormalizedImage:
    spacing = (float(spacing[0]), float(spacing[1]))
    if min(spacing) <= 0:
        raise ConfigError(f"pixel spacing must be positive, got {spacing}")
    src = _pixels(img)
    shape = physical_shape(src.shape, spacing)
    out = _bilinear(src, shape)
    return NormalizedImage(out, TARGET_SPACING_MM, (shape[0] / src.shape[0], shape[1] / src.shape[1]))


def normalize_intensity(img) -> NormalizedImage:
    """Zero-mean, unit-std standardization.  Constant input yields zeros and
    ``degenerate=True`` rather than an error."""
    x = _pixels(img)
    if x.size == 0:
        raise ConfigError("cannot normalize an empty image")
    mean = x.mean()
    std = x.std()
    spacing = img.spacing_mm if isinstance(img, NormalizedImage) else None
    scale = img.scale if isinstance(img, NormalizedImage) else (1.0, 1.0)
    if not std > 1e-12 * max(1.0, abs(mean)):
        return NormalizedImage(np.zeros_like(x), spacing, scale, degenerate=True)
    return NormalizedImage((x - mean) / std, spacing, scale)


def patch_origin(center, size) -> tuple[int, int]:
    """Top-left corner of a ``size`` patch centred on ``center``.

    The centre pixel of an even-sized patch is ``size // 2``.
    """
    return (
        int(np.floor(center[0] + 0.5)) - size[0] // 2,
        int(np.floor(center[1] + 0.5)) - size[1] // 2,
    )


def crop_patch(img, center, size, fill=None) -> np.ndarray:
    """Crop a ``size`` patch centred at ``center``; out-of-image pixels take
    ``fill`` (default: the image mean, which is 0 for standardized images)."""
    x = _pixels(img)
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ConfigError(f"patch size must be positive, got {size}")
    r0, c0 = patch_origin(center, (h, w))
    value = x.mean() if fill is None else fill
    out = np.full((h, w), value, dtype=x.dtype)
    rs, re_ = max(r0, 0), min(r0 + h, x.shape[0])
    cs, ce = max(c0, 0), min(c0 + w, x.shape[1])
    if rs < re_ and cs < ce:
        out[rs - r0 : re_ - r0, cs - c0 : ce - c0] = x[rs:re_, cs:ce]
    return out


def resize(img, target) -> np.ndarray:
    th, tw = int(target[0]), int(target[1])
    if th <= 0 or tw <= 0:
        raise ConfigError(f"target size must be positive, got {target}")
    return _bilinear(_pixels(img), (th, tw))


def rotate(img, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Bilinear rotation about the image centre (counter-clockwise in the
    row/col plane for positive angles)."""
    x = _pixels(img)
    h, w = x.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    cos, sin = np.cos(t), np.sin(t)
    rr, cc_ = np.meshgrid(np.arange(h) - cr, np.arange(w) - cc, indexing="ij")
    # inverse map: output pixel -> source coordinate
    src_r = cos * rr - sin * cc_ + cr
    src_c = sin * rr + cos * cc_ + cc
    # snap round-off (e.g. sin(2*pi)) so exact grid angles do not lose the border
    src_r = np.where(np.abs(src_r - np.rint(src_r)) < 1e-9, np.rint(src_r), src_r)
    src_c = np.where(np.abs(src_c - np.rint(src_c)) < 1e-9, np.rint(src_c), src_c)
    return ndimage.map_coordinates(x, [src_r, src_c], order=1, mode="constant", cval=fill)


def shift(img, dr: int, dc: int, fill: float = 0.0) -> np.ndarray:
    x = _pixels(img)
    out = np.full_like(x, fill)
    h, w = x.shape
    rs, re_ = max(dr, 0), min(h + dr, h)
    cs, ce = max(dc, 0), min(w + dc, w)
    if rs < re_ and cs < ce:
        out[rs:re_, cs:ce] = x[rs - dr : re_ - dr, cs - dc : ce - dc]
    return out


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 15.0
    max_shift_px: int = 8

    def __post_init__(self):
        if self.max_rotation_deg < 0 or self.max_shift_px < 0:
            raise ConfigError("augmentation magnitudes must be non-negative")


def draw_augmentation(rng: np.random.Generator, params: AugmentParams) -> tuple[float, int, int]:
    angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    m = int(params.max_shift_px)
    dr, dc = rng.integers(-m, m + 1, size=2)
    return float(angle), int(dr), int(dc)


def apply_augmentation(img, angle: float, dr: int, dc: int) -> np.ndarray:
    x = _pixels(img)
    if angle != 0.0:
        x = rotate(x, angle)
    if dr or dc:
        x = shift(x, dr, dc)
    return x


def augment(img, rng_seed, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random rotation then integer shift, drawn from a generator seeded with
    ``rng_seed`` (an int or an ``np.random.Generator``)."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    angle, dr, dc = draw_augmentation(rng, params)
    return apply_augmentation(img, angle, dr, dc)
