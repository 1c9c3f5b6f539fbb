"""Synthetic cardiac studies with analytically known volumes.

The LV cavity is an ellipsoid (semi-axes a, b along the short-axis frame
vectors e1, e2 and c along the long axis u) wrapped in a myocardial shell of
fixed thickness, with a dimmer right-ventricle blob alongside, on a smooth
random background.  Over the cycle the cavity is scaled about its centre by
``1 - kappa * (1 - cos(2 pi (t - t0) / F)) / 2``, so end-diastole is frame
``t0`` and end-systole sits half a cycle later with volume ``EDV (1 - kappa)^3``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import localize, preprocess
from .data_model import Series, SeriesKind, Study, Truth, write_study
from .errors import ConfigError, GeometryError
from .geometry import ImagePlane, world_to_pixel


@dataclass(frozen=True)
class PhantomParams:
    a: float = 28.0  # cavity semi-axes at ED, mm
    b: float = 26.0
    c: float = 45.0
    kappa: float = 0.3  # isotropic contraction fraction at ES
    frames: int = 20
    sax_positions: int = 10
    slice_gap: float = 8.0  # mm between SAX positions
    noise_sigma: float = 20.0  # intensity units (blood pool = 1000)
    myo_thickness: float = 8.0  # mm
    seed: int = 0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    long_axis: tuple[float, float, float] = (0.45, -0.35, 0.82)
    in_plane_deg: float = 0.0  # orientation of e1 about the long axis
    image_rotation_deg: float = 0.0  # SAX image axes relative to e1/e2
    image_size: int = 128
    pixel_spacing: float = 1.6  # mm
    center_offset_px: tuple[float, float] = (0.0, 0.0)  # LV centre relative to SAX image centre
    phase_offset: int = 0  # ED frame
    lax_offset_mm: tuple[float, float] = (2.0, -1.5)  # 2CH / 4CH plane displacement off the axis
    gain: float = 1.0
    age: float | None = None
    blood: float = 1000.0
    myocardium: float = 350.0
    rv: float = 600.0
    background: float = 150.0
    texture: float = 40.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ConfigError("semi-axes must be positive")
        if not 0 <= self.kappa < 1:
            raise ConfigError("kappa must lie in [0, 1)")
        if self.sax_positions < 6:
            raise ConfigError("phantoms need at least 6 SAX positions")
        if self.frames < 2:
            raise ConfigError("phantoms need at least 2 frames")
        if self.noise_sigma < 0 or self.myo_thickness < 0 or self.pixel_spacing <= 0:
            raise ConfigError("noise, wall thickness and spacing must be non-negative/positive")
        if np.linalg.norm(self.long_axis) == 0:
            raise ConfigError("long axis must be non-zero")


def analytic_volumes(params: PhantomParams) -> tuple[float, float]:
    """(EDV, ESV) in ml."""
    edv = 4.0 / 3.0 * np.pi * params.a * params.b * params.c / 1000.0
    return float(edv), float(edv * (1.0 - params.kappa) ** 3)


def cycle_scale(params: PhantomParams, t) -> np.ndarray:
    phase = 2.0 * np.pi * (np.asarray(t, dtype=float) - params.phase_offset) / params.frames
    return 1.0 - params.kappa * (1.0 - np.cos(phase)) / 2.0


def analytic_phases(params: PhantomParams) -> tuple[int, int]:
    """Frames of maximal / minimal cavity volume (earliest on ties)."""
    s = cycle_scale(params, np.arange(params.frames))
    vol = np.round(s**3, 12)
    return int(np.argmax(vol)), int(np.argmin(vol))


def frame_axes(params: PhantomParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed (e1, e2, u) with u along the long axis (base -> apex)."""
    u = np.asarray(params.long_axis, dtype=float)
    u = u / np.linalg.norm(u)
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - (helper @ u) * u
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    t = np.deg2rad(params.in_plane_deg)
    e1, e2 = np.cos(t) * e1 + np.sin(t) * e2, -np.sin(t) * e1 + np.cos(t) * e2
    return e1, e2, u


def sax_planes(params: PhantomParams) -> list[ImagePlane]:
    e1, e2, u = frame_axes(params)
    t = np.deg2rad(params.image_rotation_deg)
    row = np.cos(t) * e1 + np.sin(t) * e2
    col = np.cross(u, row)
    n, sp = params.image_size, params.pixel_spacing
    c0 = np.asarray(params.center, dtype=float)
    cr = n / 2.0 + params.center_offset_px[0]
    cc = n / 2.0 + params.center_offset_px[1]
    planes = []
    for k in range(params.sax_positions):
        z = (k - (params.sax_positions - 1) / 2.0) * params.slice_gap
        p = c0 + z * u
        origin = p - cr * sp * row - cc * sp * col
        planes.append(ImagePlane(origin, row, col, (sp, sp), (n, n)))
    return planes


def lax_planes(params: PhantomParams) -> tuple[ImagePlane, ImagePlane]:
    """(2CH, 4CH): planes containing the long axis, spanned with e1 and e2."""
    e1, e2, u = frame_axes(params)
    n, sp = params.image_size, params.pixel_spacing
    c0 = np.asarray(params.center, dtype=float)
    d2, d4 = params.lax_offset_mm
    out = []
    for col, shift in ((e1, d2 * e2), (e2, d4 * e1)):
        p = c0 + shift
        origin = p - (n / 2.0) * sp * u - (n / 2.0) * sp * col
        out.append(ImagePlane(origin, u, col, (sp, sp), (n, n)))
    return out[0], out[1]


def true_centers(params: PhantomParams) -> list[tuple[float, float]]:
    """LV centre (row, col) on every SAX position, original pixel grid."""
    _, _, u = frame_axes(params)
    c0 = np.asarray(params.center, dtype=float)
    out = []
    for k, plane in enumerate(sax_planes(params)):
        z = (k - (params.sax_positions - 1) / 2.0) * params.slice_gap
        out.append(world_to_pixel(plane, c0 + z * u))
    return out


def _ellipsoid_field(q: np.ndarray, axes) -> tuple[np.ndarray, np.ndarray]:
    """Normalized radius rho and the factor turning (rho - s) into an
    approximate signed distance (mm) to the ellipsoid scaled by s."""
    ax = np.asarray(axes, dtype=float)
    rho = np.sqrt(np.sum((q / ax) ** 2, axis=-1))
    grad = np.sqrt(np.sum((q / ax**2) ** 2, axis=-1))
    return rho, rho / np.maximum(grad, 1e-12)


def _occupancy(dist: np.ndarray, px: float) -> np.ndarray:
    """Partial-volume occupancy from a signed distance (negative inside)."""
    return np.clip(0.5 - dist / px, 0.0, 1.0)


def _render(params: PhantomParams, plane: ImagePlane, rng: np.random.Generator, frames=None) -> np.ndarray:
    e1, e2, u = frame_axes(params)
    c0 = np.asarray(params.center, dtype=float)
    rows, cols = plane.extent
    world = (
        plane.origin
        + np.multiply.outer(np.arange(rows) * plane.spacing[0], plane.row_dir)[:, None, :]
        + np.multiply.outer(np.arange(cols) * plane.spacing[1], plane.col_dir)[None, :, :]
    )
    q = (world - c0) @ np.stack([e1, e2, u], axis=1)
    axes = np.array([params.a, params.b, params.c])
    rv_offset = np.array([0.0, params.b + params.myo_thickness + 0.55 * params.b, 0.0])
    rv_axes = np.array([0.9 * params.a, 0.6 * params.b, 0.85 * params.c])
    px = min(plane.spacing)
    # scaling an ellipsoid by s about its centre: distance ~ (rho - s) * k
    rho_cav, k_cav = _ellipsoid_field(q, axes)
    rho_rv, k_rv = _ellipsoid_field(q - rv_offset, rv_axes)

    noise_field = ndimage.gaussian_filter(rng.standard_normal((rows, cols)), 3.0)
    noise_field /= max(noise_field.std(), 1e-12)
    base = params.background + params.texture * noise_field

    frames = range(params.frames) if frames is None else frames
    out = np.empty((len(frames), rows, cols), dtype=np.float32)
    for i, t in enumerate(frames):
        s = float(cycle_scale(params, t))
        f_cav = _occupancy((rho_cav - s) * k_cav, px)
        f_rv = _occupancy((rho_rv - s) * k_rv, px)
        # the wall keeps a fixed thickness, so its outer surface is not a pure scaling
        rho_m, k_m = _ellipsoid_field(q, axes * s + params.myo_thickness)
        f_myo = _occupancy((rho_m - 1.0) * k_m, px)
        img = base + (params.rv - base) * f_rv
        img += (params.myocardium - img) * f_myo
        img += (params.blood - img) * f_cav
        img *= params.gain
        if params.noise_sigma > 0:
            img += rng.normal(0.0, params.noise_sigma, size=img.shape)
        out[i] = np.clip(img, 0.0, 65535.0)
    return out


@dataclass(frozen=True)
class PhantomStudy:
    study: Study
    truth: Truth | None
    centers: list
    ed: int
    es: int
    params: PhantomParams = field(repr=False)

    def manifest(self) -> dict:
        # analytic volumes even when kappa = 0 leaves the study without a Truth
        edv, esv = analytic_volumes(self.params)
        return {
            "edv_ml": edv,
            "esv_ml": esv,
            "centers_px": [list(c) for c in self.centers],
            "ed_frame": self.ed,
            "es_frame": self.es,
            "age_years": self.params.age,
        }


def generate_study(params: PhantomParams, with_2ch=True, with_4ch=True) -> PhantomStudy:
    edv, esv = analytic_volumes(params)
    truth = Truth(edv, esv) if params.kappa > 0 else None
    rng = np.random.default_rng(params.seed)
    planes = sax_planes(params)
    centers = true_centers(params)
    if not any(0 <= r < params.image_size and 0 <= c < params.image_size for r, c in centers):
        raise GeometryError("phantom LV falls outside every SAX image")
    sax = Series(SeriesKind.SAX, tuple(_render(params, p, rng) for p in planes), tuple(planes))
    p2, p4 = lax_planes(params)
    ch2 = Series(SeriesKind.LAX_2CH, (_render(params, p2, rng),), (p2,))
    ch4 = Series(SeriesKind.LAX_4CH, (_render(params, p4, rng),), (p4,))
    study = Study(
        id=f"phantom-{params.seed}",
        sax=sax,
        ch2=ch2 if with_2ch else None,
        ch4=ch4 if with_4ch else None,
        truth=truth,
        age=params.age,
    )
    ed, es = analytic_phases(params)
    return PhantomStudy(study, truth, centers, ed, es, params)


@dataclass(frozen=True)
class Variation:
    """Half-widths / ranges of the per-study parameter jitter."""

    a: tuple[float, float] | None = (22.0, 34.0)
    b: tuple[float, float] | None = (21.0, 32.0)
    c: tuple[float, float] | None = (38.0, 55.0)
    kappa: tuple[float, float] | None = (0.2, 0.42)
    center_offset_px: float = 12.0
    axis_tilt_deg: float = 20.0
    random_orientation: bool = True
    random_phase: bool = True
    gain: tuple[float, float] | None = (0.8, 1.25)
    age: tuple[float, float] | None = (5.0, 85.0)
    lax_offset: bool = True  # redraw the 2CH / 4CH off-axis displacement

    @classmethod
    def none(cls) -> "Variation":
        return cls(None, None, None, None, 0.0, 0.0, False, False, None, None, False)


def _jitter(base: PhantomParams, var: Variation, rng: np.random.Generator, seed: int) -> PhantomParams:
    kw = {"seed": seed}
    for name in ("a", "b", "c", "kappa", "gain"):
        rng_range = getattr(var, name)
        if rng_range is not None:
            kw[name] = float(rng.uniform(*rng_range))
    if var.center_offset_px:
        kw["center_offset_px"] = tuple(float(x) for x in rng.uniform(-var.center_offset_px, var.center_offset_px, 2))
    if var.axis_tilt_deg:
        u = np.asarray(base.long_axis, float)
        u /= np.linalg.norm(u)
        tilt = rng.normal(size=3)
        tilt -= (tilt @ u) * u
        tilt /= np.linalg.norm(tilt)
        ang = np.deg2rad(rng.uniform(0, var.axis_tilt_deg))
        kw["long_axis"] = tuple(float(x) for x in np.cos(ang) * u + np.sin(ang) * tilt)
    if var.random_orientation:
        kw["in_plane_deg"] = float(rng.uniform(0, 360))
        kw["image_rotation_deg"] = float(rng.uniform(0, 360))
    if var.random_phase:
        kw["phase_offset"] = int(rng.integers(0, base.frames))
    if var.age is not None:
        kw["age"] = float(np.round(rng.uniform(*var.age), 1))
    if var.lax_offset and base.lax_offset_mm != (0.0, 0.0):
        mag = float(np.max(np.abs(base.lax_offset_mm)))
        kw["lax_offset_mm"] = tuple(float(x) for x in rng.uniform(-mag, mag, 2))
    return replace(base, **kw)


def dataset_params(n: int, base: PhantomParams = PhantomParams(), variation: Variation = Variation()) -> list[PhantomParams]:
    """Per-study parameters; study ``i`` uses noise seed ``base.seed + i``."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([base.seed, i, 7919])
        out.append(_jitter(base, variation, rng, base.seed + i))
    return out


def iter_dataset(n: int, base: PhantomParams = PhantomParams(), variation: Variation = Variation()):
    for p in dataset_params(n, base, variation):
        yield generate_study(p)


def generate_dataset(n: int, base: PhantomParams = PhantomParams(), variation: Variation = Variation()) -> list[PhantomStudy]:
    return list(iter_dataset(n, base, variation))


def write_dataset(studies, out) -> Path:
    """Write study directories plus ``truth.json`` and ``truth.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    lines = ["study_id,edv_ml,esv_ml,age_years"]
    for ps in studies:
        write_study(ps.study, out / ps.study.id)
        manifest[ps.study.id] = ps.manifest()
        age = "" if ps.params.age is None else repr(ps.params.age)
        edv, esv = analytic_volumes(ps.params)
        lines.append(f"{ps.study.id},{edv!r},{esv!r},{age}")
    (out / "truth.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "truth.csv").write_text("\n".join(lines) + "\n")
    return out


def voxel_volume(params: PhantomParams, scale: float = 1.0, step: float = 0.5) -> float:
    """Cavity volume (ml) by counting voxel centres on a ``step`` mm grid.

    Independent of ``analytic_volumes``: used as its numerical oracle.
    """
    a, b, c = params.a * scale, params.b * scale, params.c * scale
    xs = np.arange(-a, a + step, step)
    ys = np.arange(-b, b + step, step)
    zs = np.arange(-c, c + step, step)
    count = 0
    for z in zs:
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        count += int(np.count_nonzero((xx / a) ** 2 + (yy / b) ** 2 + (z / c) ** 2 <= 1.0))
    return count * step**3 / 1000.0


def atlas_patch(params: PhantomParams, position: int, frame: int) -> np.ndarray:
    """64x64 LV-centred patch from one standardized, 1.4 mm SAX frame."""
    plane = sax_planes(params)[position]
    rng = np.random.default_rng(params.seed)
    img = _render(params, plane, rng, frames=[frame])[0]
    norm = preprocess.resample_to_physical(img, plane.spacing)
    std = preprocess.normalize_intensity(norm)
    center = norm.to_resampled(*true_centers(params)[position])
    return preprocess.crop_patch(std.pixels, center, (localize.ATLAS_SIZE, localize.ATLAS_SIZE))


def build_phantom_atlas(n: int = 1000, seed: int = 12345) -> localize.Atlas:
    """Mean of ``n`` LV-centred patches drawn from jittered phantoms."""
    base = PhantomParams(seed=seed)
    patches = []
    rng = np.random.default_rng(seed)
    for p in dataset_params(n, base, Variation()):
        pos = int(rng.integers(1, p.sax_positions - 1))
        frame = int(rng.integers(0, p.frames))
        patches.append(atlas_patch(p, pos, frame))
    return localize.build_atlas(patches)


def params_to_dict(params: PhantomParams) -> dict:
    return asdict(params)
