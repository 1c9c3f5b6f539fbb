"""Per-study preprocessing: localization, ED/ES selection, per-view ROIs."""
from __future__ import annotations

import io
import warnings
import zipfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import geometry, localize, preprocess
from .data_model import Study
from .errors import MissingViewError
from .views import LAX_ROLES, ViewRole, classify_slices

PHASES = ("ED", "ES")


@dataclass(frozen=True)
class PipelineSettings:
    input_hw: int = 224
    R: int = 6
    T: int = 12
    atlas: localize.Atlas | None = field(default=None, compare=False, repr=False)

    @cached_property
    def bank(self) -> localize.AtlasBank:
        atlas = self.atlas if self.atlas is not None else localize.default_atlas()
        return localize.expand_atlas(atlas, self.R, self.T)


@dataclass
class ResampledSeries:
    raw: np.ndarray  # (frames, rows, cols) on the 1.4 mm grid, original intensities
    image: preprocess.NormalizedImage  # standardized temporal mean, used for matching
    plane: geometry.ImagePlane


@dataclass
class StudyLocalization:
    sax_positions: dict  # role -> 0-based SAX position
    roi_center: tuple[float, float]  # on the resampled SAX grid
    roi_score: float
    ed: int
    es: int
    lax_centers: dict = field(default_factory=dict)  # role -> centre on the resampled LAX grid
    coarse: tuple[float, float] | None = None  # coarse centre on the original top-slice grid
    resampled: dict = field(default_factory=dict, repr=False)

    def frame(self, phase: str) -> int:
        if phase.upper() not in PHASES:
            raise ValueError(f"phase must be ED or ES, got {phase!r}")
        return self.ed if phase.upper() == "ED" else self.es


def _resample_series(frames: np.ndarray, plane) -> ResampledSeries:
    raw = np.stack([preprocess.resample_to_physical(f, plane.spacing).pixels for f in frames])
    first = preprocess.resample_to_physical(frames[0], plane.spacing)
    mean = preprocess.normalize_intensity(raw.mean(axis=0))
    image = preprocess.NormalizedImage(mean.pixels, first.spacing_mm, first.scale, mean.degenerate)
    return ResampledSeries(raw, image, plane)


def localize_study(study: Study, settings: PipelineSettings, roles=None) -> StudyLocalization:
    """Run coarse + fine localization and ED/ES selection for ``study``.

    The ROI is detected on the top slice and projected onto the other SAX
    slices; ED/ES frames come from ROI intensity sums on the mid slice.
    """
    if study.sax is None:
        raise MissingViewError(ViewRole.TOP)
    C = study.sax.n_positions
    positions = {r: i - 1 for r, i in classify_slices(C).items()}
    roles = tuple(roles) if roles is not None else (ViewRole.TOP, ViewRole.MID, ViewRole.BOTTOM) + LAX_ROLES
    wanted = {ViewRole.TOP, ViewRole.MID} | {r for r in roles if r not in LAX_ROLES}
    res = {r: _resample_series(study.sax.frames[positions[r]], study.sax.planes[positions[r]]) for r in wanted}

    top = res[ViewRole.TOP]
    coarse = None
    if study.ch2 is not None and study.ch4 is not None:
        coarse = geometry.coarse_center(top.plane, study.ch2.planes[0], study.ch4.planes[0])
        roi = localize.refine_roi(top.image, top.image.to_resampled(*coarse), settings.bank)
    else:
        roi = localize.full_image_roi(top.image, settings.bank)

    mid = res[ViewRole.MID]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", localize.ProjectionWarning)
        mid_roi = localize.project_roi(roi, top.plane, mid.plane, mid.image)
    cycle = [preprocess.crop_patch(f, mid_roi.center, mid_roi.size) for f in mid.raw]
    ed, es = localize.select_ed_es(cycle)

    loc = StudyLocalization(
        sax_positions=positions, roi_center=roi.center, roi_score=roi.score, ed=ed, es=es, coarse=coarse, resampled=res
    )
    for role, series in ((ViewRole.CH2, study.ch2), (ViewRole.CH4, study.ch4)):
        if role not in roles or series is None:
            continue
        lax = _resample_series(series.frames[0], series.planes[0])
        loc.resampled[role] = lax
        if study.ch2 is not None and study.ch4 is not None:
            # long axis meets the mid SAX plane near the cavity centre
            hit = geometry.long_axis_point(study.ch2.planes[0], study.ch4.planes[0], mid.plane)
            guess = lax.image.to_resampled(*geometry.world_to_pixel(lax.plane, hit))
            lax_roi = localize.refine_roi(lax.image, guess, settings.bank)
        else:
            lax_roi = localize.full_image_roi(lax.image, settings.bank)
        loc.lax_centers[role] = lax_roi.center
    return loc


def _lax_frame(frame: int, n_sax: int, n_lax: int) -> int:
    if n_sax == n_lax:
        return frame
    return int(round(frame * n_lax / n_sax)) % n_lax


def role_images(study: Study, loc: StudyLocalization, roles, phase: str, settings: PipelineSettings) -> dict:
    """ROI crop -> resize to ``input_hw`` -> standardize, per role."""
    frame = loc.frame(phase)
    out = {}
    hw = (settings.input_hw, settings.input_hw)
    for role in roles:
        if role in LAX_ROLES:
            if role not in loc.resampled:
                raise MissingViewError(role)
            lax = loc.resampled[role]
            f = _lax_frame(frame, study.sax.n_frames, lax.raw.shape[0])
            patch = preprocess.crop_patch(lax.raw[f], loc.lax_centers[role], (localize.ROI_SIZE,) * 2)
        else:
            if role not in loc.resampled:
                pos = loc.sax_positions[role]
                loc.resampled[role] = _resample_series(study.sax.frames[pos], study.sax.planes[pos])
            sax = loc.resampled[role]
            patch = preprocess.crop_patch(sax.raw[frame], loc.roi_center, (localize.ROI_SIZE,) * 2)
        out[role] = preprocess.normalize_intensity(preprocess.resize(patch, hw)).pixels
    return out


@dataclass
class StudyInputs:
    """Preprocessed network inputs for one study: per phase, per role."""

    study_id: str
    images: dict  # phase -> {role: (H, W) array}
    edv: float | None
    esv: float | None
    age: float | None
    ed: int
    es: int


def prepare_study(study: Study, settings: PipelineSettings, roles) -> StudyInputs:
    available = tuple(
        r for r in roles if not (r is ViewRole.CH2 and study.ch2 is None) and not (r is ViewRole.CH4 and study.ch4 is None)
    )
    loc = localize_study(study, settings, roles=available)
    images = {ph: role_images(study, loc, available, ph, settings) for ph in PHASES}
    t = study.truth
    return StudyInputs(
        study.id, images, None if t is None else t.edv_ml, None if t is None else t.esv_ml, study.age, loc.ed, loc.es
    )


# ---------------------------------------------------------------- storage

def save_npz(path, arrays: dict) -> Path:
    """Like ``np.savez`` but byte-reproducible (fixed zip timestamps)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def _nan(x):
    return np.nan if x is None else float(x)


def save_inputs(inputs, roles, path):
    """Store prepared studies: ``<phase>_<role>`` image stacks plus ids,
    volumes (NaN when unknown), ages and ED/ES frames."""
    inputs = list(inputs)
    arrays = {
        "ids": np.array([s.study_id for s in inputs]),
        "roles": np.array([r.value for r in roles]),
        "edv": np.array([_nan(s.edv) for s in inputs]),
        "esv": np.array([_nan(s.esv) for s in inputs]),
        "age": np.array([_nan(s.age) for s in inputs]),
        "ed": np.array([s.ed for s in inputs]),
        "es": np.array([s.es for s in inputs]),
    }
    for ph in PHASES:
        for r in roles:
            arrays[f"{ph}_{r.value}"] = np.stack([s.images[ph][r] for s in inputs])
    return save_npz(path, arrays)


def load_inputs(path) -> tuple[list[StudyInputs], tuple[ViewRole, ...]]:
    with np.load(path, allow_pickle=False) as z:
        roles = tuple(ViewRole(v) for v in z["roles"])
        ids = [str(i) for i in z["ids"]]
        stacks = {(ph, r): z[f"{ph}_{r.value}"] for ph in PHASES for r in roles}
        out = []
        for i, sid in enumerate(ids):
            images = {ph: {r: stacks[(ph, r)][i] for r in roles} for ph in PHASES}
            num = lambda k: None if np.isnan(z[k][i]) else float(z[k][i])
            out.append(StudyInputs(sid, images, num("edv"), num("esv"), num("age"), int(z["ed"][i]), int(z["es"][i])))
    return out, roles
