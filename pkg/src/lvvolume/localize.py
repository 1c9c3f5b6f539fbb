"""Fine LV localization by multi-scale, multi-rotation atlas matching.

The search slides every atlas variant over a search patch and keeps the
(position, variant) pair with the smallest mean absolute difference.  Scores
are per-pixel means so that differently sized variants compete fairly.
Ties go to the lowest window offset (row-major), then the lowest variant
index.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from . import preprocess
from .errors import ConfigError, GeometryError, ShapeError
from .geometry import ImagePlane

ATLAS_SIZE = 64
SEARCH_SIZE = 100
ROI_SIZE = 92
SCALE_RANGE = (52, 72)

try:  # pragma: no cover - exercised implicitly
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class Atlas:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (ATLAS_SIZE, ATLAS_SIZE):
            raise ShapeError(f"atlas must be {ATLAS_SIZE}x{ATLAS_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ShapeError("atlas contains non-finite values")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class AtlasVariant:
    scale: int
    rotation_deg: float
    pixels: np.ndarray


@dataclass(frozen=True)
class AtlasBank:
    variants: tuple[AtlasVariant, ...]
    R: int
    T: int

    def __len__(self):
        return len(self.variants)

    @property
    def max_size(self) -> int:
        return max(v.pixels.shape[0] for v in self.variants)


@dataclass(frozen=True)
class Match:
    center: tuple[float, float]
    score: float
    variant: int
    offset: tuple[int, int]


@dataclass(frozen=True)
class Roi:
    center: tuple[float, float]
    pixels: np.ndarray
    size: tuple[int, int] = (ROI_SIZE, ROI_SIZE)
    image_shape: tuple[int, int] | None = None
    score: float | None = None

    def __post_init__(self):
        if tuple(self.pixels.shape) != tuple(self.size):
            raise ShapeError(f"ROI pixels {self.pixels.shape} do not match size {self.size}")


# ---------------------------------------------------------------- atlas

def build_atlas(patches) -> Atlas:
    patches = list(patches)
    if not patches:
        raise ConfigError("cannot build an atlas from zero patches")
    acc = np.zeros((ATLAS_SIZE, ATLAS_SIZE))
    for p in patches:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (ATLAS_SIZE, ATLAS_SIZE):
            raise ShapeError(f"atlas patches must be {ATLAS_SIZE}x{ATLAS_SIZE}, got {p.shape}")
        acc += p
    return Atlas(acc / len(patches))


def bank_scales(R: int) -> list[int]:
    lo, hi = SCALE_RANGE
    if R == 1:
        return [ATLAS_SIZE]
    return [int(round(lo + i * (hi - lo) / (R - 1))) for i in range(R)]


def bank_rotations(T: int) -> list[float]:
    return [j * 360.0 / T for j in range(T)]


def expand_atlas(atlas: Atlas, R: int = 6, T: int = 12) -> AtlasBank:
    """R scales x T rotations; variant index = scale_index * T + rotation_index."""
    if R < 1 or T < 1:
        raise ConfigError("R and T must be at least 1")
    variants = []
    for s in bank_scales(R):
        scaled = preprocess.resize(atlas.pixels, (s, s))
        for theta in bank_rotations(T):
            if theta == 0.0:
                px = scaled
            else:
                px = _rotate_nearest_fill(scaled, theta)
            variants.append(AtlasVariant(s, theta, np.ascontiguousarray(px)))
    return AtlasBank(tuple(variants), R, T)


def _rotate_nearest_fill(img: np.ndarray, theta: float) -> np.ndarray:
    from scipy import ndimage

    h, w = img.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(theta)
    rr, cc_ = np.meshgrid(np.arange(h) - cr, np.arange(w) - cc, indexing="ij")
    src_r = np.cos(t) * rr - np.sin(t) * cc_ + cr
    src_c = np.sin(t) * rr + np.cos(t) * cc_ + cc
    # corners rotated in from outside the square take the nearest edge value
    return ndimage.map_coordinates(img, [src_r, src_c], order=1, mode="nearest")


# Atlas files store the (standardized) atlas as 16-bit grayscale with a fixed
# affine code: value = round(x * ATLAS_CODE_SCALE + ATLAS_CODE_OFFSET).
ATLAS_CODE_SCALE = 4096.0
ATLAS_CODE_OFFSET = 32768.0


def save_atlas(atlas: Atlas, path) -> None:
    code = np.clip(np.rint(atlas.pixels * ATLAS_CODE_SCALE + ATLAS_CODE_OFFSET), 0, 65535).astype(np.uint16)
    info = PngImagePlugin.PngInfo()
    info.add_text("lvvolume-atlas", f"scale={ATLAS_CODE_SCALE} offset={ATLAS_CODE_OFFSET}")
    Image.fromarray(code).save(Path(path), pnginfo=info)


def load_atlas(path) -> Atlas:
    with Image.open(Path(path)) as im:
        code = np.array(im).astype(np.float64)
    return Atlas((code - ATLAS_CODE_OFFSET) / ATLAS_CODE_SCALE)


def default_atlas() -> Atlas:
    """The packaged atlas (built from phantom patches)."""
    path = Path(__file__).with_name("data") / "atlas.png"
    if path.is_file():
        return load_atlas(path)
    from .phantom import build_phantom_atlas  # built on the fly when not packaged

    return build_phantom_atlas()


# ---------------------------------------------------------------- matching

def mad_score(window, variant) -> float:
    window = np.asarray(window, dtype=np.float64)
    variant = np.asarray(variant, dtype=np.float64)
    if window.shape != variant.shape:
        raise ShapeError(f"window {window.shape} and variant {variant.shape} differ in shape")
    return float(np.abs(window - variant).mean())


if _HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _scan_variant(search, tmpl, bound):  # pragma: no cover - compiled
        H, W = search.shape
        h, w = tmpl.shape
        n = h * w
        best = bound
        br, bc = -1, -1
        for r in range(H - h + 1):
            for c in range(W - w + 1):
                total = 0.0
                pruned = False
                for i in range(h):
                    for j in range(w):
                        total += abs(search[r + i, c + j] - tmpl[i, j])
                    # partial sums only grow, so this never discards a tie
                    if total / n > best:
                        pruned = True
                        break
                if pruned:
                    continue
                score = total / n
                if score < best or (br < 0 and score == best):
                    best = score
                    br, bc = r, c
        if br < 0:
            return np.inf, -1, -1
        return best, br, bc


def _scan_variant_numpy(search: np.ndarray, tmpl: np.ndarray, bound: float):
    from numpy.lib.stride_tricks import sliding_window_view

    h, w = tmpl.shape
    windows = sliding_window_view(search, (h, w))
    best, br, bc = np.inf, -1, -1
    for r in range(windows.shape[0]):
        row = np.abs(windows[r] - tmpl).sum(axis=(1, 2)) / (h * w)
        c = int(np.argmin(row))
        if row[c] < best:
            best, br, bc = float(row[c]), r, c
    if best > bound:
        return np.inf, -1, -1
    return best, br, bc


def match_atlas(search, bank: AtlasBank) -> Match:
    search = np.ascontiguousarray(search, dtype=np.float64)
    for v in bank.variants:
        if v.pixels.shape[0] > search.shape[0] or v.pixels.shape[1] > search.shape[1]:
            raise ShapeError(f"variant {v.pixels.shape} does not fit the search patch {search.shape}")
    scan = _scan_variant if _HAVE_NUMBA else _scan_variant_numpy
    best_key = None
    for idx, v in enumerate(bank.variants):
        # a later variant can only win by scoring <= the best so far
        bound = np.inf if best_key is None else best_key[0]
        score, r, c = scan(search, v.pixels, bound)
        if r < 0:
            continue
        key = (score, r, c, idx)
        if best_key is None or key < best_key:
            best_key = key
    _, r, c, idx = best_key
    tmpl = bank.variants[idx].pixels
    h, w = tmpl.shape
    score = mad_score(search[r : r + h, c : c + w], tmpl)
    return Match(center=(r + (h - 1) / 2.0, c + (w - 1) / 2.0), score=score, variant=idx, offset=(r, c))


def refine_roi(slice_img, coarse, bank: AtlasBank, roi_size=(ROI_SIZE, ROI_SIZE), search_size=SEARCH_SIZE) -> Roi:
    """Search a patch around ``coarse`` and return the ROI at the best match.

    ``slice_img`` is expected on the normalized (1.4 mm, standardized) grid.
    """
    img = np.asarray(getattr(slice_img, "pixels", slice_img), dtype=np.float64)
    patch = preprocess.crop_patch(img, coarse, (search_size, search_size))
    m = match_atlas(patch, bank)
    r0, c0 = preprocess.patch_origin(coarse, (search_size, search_size))
    center = (r0 + m.center[0], c0 + m.center[1])
    pixels = preprocess.crop_patch(img, center, roi_size)
    return Roi(center, pixels, tuple(roi_size), img.shape, m.score)


def full_image_roi(slice_img, bank: AtlasBank, roi_size=(ROI_SIZE, ROI_SIZE)) -> Roi:
    """Atlas search over the whole image, for studies lacking long-axis planes."""
    img = np.asarray(getattr(slice_img, "pixels", slice_img), dtype=np.float64)
    size = max(img.shape[0], img.shape[1], bank.max_size)
    center = ((img.shape[0] - 1) / 2.0, (img.shape[1] - 1) / 2.0)
    return refine_roi(img, center, bank, roi_size, search_size=size)


class ProjectionWarning(UserWarning):
    pass


def project_roi(roi: Roi, from_plane: ImagePlane, to_plane: ImagePlane, target_image) -> Roi:
    """Copy the ROI centre (in pixel coordinates) onto another slice of the
    same short-axis stack and crop there."""
    if not (
        np.allclose(from_plane.row_dir, to_plane.row_dir, atol=1e-6)
        and np.allclose(from_plane.col_dir, to_plane.col_dir, atol=1e-6)
        and np.allclose(from_plane.spacing, to_plane.spacing)
    ):
        raise GeometryError("ROI projection requires slices of the same short-axis series")
    img = np.asarray(getattr(target_image, "pixels", target_image), dtype=np.float64)
    r, c = roi.center
    cr = min(max(r, 0.0), img.shape[0] - 1.0)
    cc = min(max(c, 0.0), img.shape[1] - 1.0)
    if (cr, cc) != (r, c):
        warnings.warn(
            f"projected ROI centre ({r:.1f}, {c:.1f}) clamped to ({cr:.1f}, {cc:.1f})",
            ProjectionWarning,
            stacklevel=2,
        )
    pixels = preprocess.crop_patch(img, (cr, cc), roi.size)
    return Roi((cr, cc), pixels, roi.size, img.shape, roi.score)


def select_ed_es(frames) -> tuple[int, int]:
    """ED = frame with the largest intensity sum, ES = the smallest; ties go to
    the earliest frame."""
    frames = list(frames)
    if len(frames) < 2:
        raise ConfigError("ED/ES selection needs at least two frames")
    sums = np.array([float(np.sum(np.asarray(f, dtype=np.float64))) for f in frames])
    return int(np.argmax(sums)), int(np.argmin(sums))
