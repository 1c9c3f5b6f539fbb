"""Study / series / slice containers and the on-disk study format.

Layout of a study directory::

    <study>/meta.json
    <study>/sax/pos<i>/frame<j>.png
    <study>/2ch/frame<j>.png        (optional)
    <study>/4ch/frame<j>.png        (optional)

Frames are 16-bit grayscale PNGs; ``meta.json`` carries the plane geometry.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FrameCountMismatch, StudyFormatError
from .geometry import ImagePlane

MIN_SAX_POSITIONS = 5


class SeriesKind(str, enum.Enum):
    SAX = "sax"
    LAX_2CH = "2ch"
    LAX_4CH = "4ch"


@dataclass(frozen=True)
class Slice:
    pixels: np.ndarray
    frame_index: int
    plane: ImagePlane


@dataclass(frozen=True)
class Series:
    """Frames of one series.

    ``frames[i]`` is a ``(n_frames, rows, cols)`` array for spatial position
    ``i``; long-axis series have a single position.
    """

    kind: SeriesKind
    frames: tuple[np.ndarray, ...]
    planes: tuple[ImagePlane, ...]

    def __post_init__(self):
        if len(self.frames) != len(self.planes) or not self.frames:
            raise StudyFormatError(f"{self.kind.value}: need one plane per position")
        counts = {f.shape[0] for f in self.frames}
        if len(counts) != 1:
            raise FrameCountMismatch(f"{self.kind.value}: positions disagree on frame count {sorted(counts)}")
        for f in self.frames:
            if f.ndim != 3 or f.shape[1] == 0 or f.shape[2] == 0:
                raise StudyFormatError(f"{self.kind.value}: empty pixel grid")
            if not np.all(np.isfinite(f)):
                raise StudyFormatError(f"{self.kind.value}: non-finite intensities")
            f.flags.writeable = False

    @property
    def n_positions(self) -> int:
        return len(self.frames)

    @property
    def n_frames(self) -> int:
        return self.frames[0].shape[0]

    def slice(self, position: int, frame: int) -> Slice:
        return Slice(self.frames[position][frame], frame, self.planes[position])


@dataclass(frozen=True)
class Truth:
    edv_ml: float
    esv_ml: float

    def __post_init__(self):
        if not self.edv_ml > self.esv_ml > 0:
            raise StudyFormatError(f"truth must satisfy EDV > ESV > 0, got {self.edv_ml}, {self.esv_ml}")


@dataclass(frozen=True)
class Study:
    id: str
    sax: Series | None
    ch2: Series | None = None
    ch4: Series | None = None
    truth: Truth | None = None
    age: float | None = None
    notes: tuple[str, ...] = field(default=(), compare=False)

    def series(self, kind: SeriesKind) -> Series | None:
        return {SeriesKind.SAX: self.sax, SeriesKind.LAX_2CH: self.ch2, SeriesKind.LAX_4CH: self.ch4}[kind]


@dataclass(frozen=True)
class Finding:
    severity: str  # "warning" | "fatal"
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def fatal(self) -> bool:
        return any(f.severity == "fatal" for f in self.findings)

    @property
    def warnings(self) -> list[str]:
        return [f.message for f in self.findings if f.severity == "warning"]

    def __len__(self):
        return len(self.findings)

    def __bool__(self):
        return bool(self.findings)


FALLBACK_NOTE = "2CH series absent: fallback view set required"


def validate_study(study: Study) -> ValidationReport:
    findings = []
    if study.sax is None:
        findings.append(Finding("fatal", "SAX series absent"))
    elif study.sax.n_positions < MIN_SAX_POSITIONS:
        findings.append(
            Finding("fatal", f"SAX stack has {study.sax.n_positions} positions; at least {MIN_SAX_POSITIONS} required")
        )
    elif study.sax.n_positions == MIN_SAX_POSITIONS:
        findings.append(Finding("warning", "SAX stack has 5 positions: mid and bottom roles coincide"))
    if study.ch2 is None:
        findings.append(Finding("warning", FALLBACK_NOTE))
    if study.ch4 is None:
        findings.append(Finding("warning", "4CH series absent"))
    return ValidationReport(tuple(findings))


# --------------------------------------------------------------------------
# on-disk format

def _plane_meta(plane: ImagePlane, frame_count: int) -> dict:
    return {
        "pixel_spacing_mm": list(plane.spacing),
        "image_position_world_mm": plane.origin.tolist(),
        "row_cosine": plane.row_dir.tolist(),
        "col_cosine": plane.col_dir.tolist(),
        "extent": list(plane.extent),
        "frame_count": frame_count,
    }


def _plane_from_meta(meta: dict, where: str) -> tuple[ImagePlane | None, int]:
    try:
        spacing = [float(x) for x in meta["pixel_spacing_mm"]]
        origin = [float(x) for x in meta["image_position_world_mm"]]
        row = [float(x) for x in meta["row_cosine"]]
        col = [float(x) for x in meta["col_cosine"]]
        frame_count = int(meta["frame_count"])
        extent = meta.get("extent")
    except (KeyError, TypeError, ValueError) as exc:
        raise StudyFormatError(f"{where}: malformed geometry entry ({exc})") from None
    if len(spacing) != 2 or len(origin) != 3 or len(row) != 3 or len(col) != 3:
        raise StudyFormatError(f"{where}: wrong vector length in geometry entry")
    return (spacing, origin, row, col, extent), frame_count


def _to_uint16(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame), 0, 65535).astype(np.uint16)


def write_study(study: Study, path) -> Path:
    """Serialize ``study`` to a study directory (pixels rounded to uint16)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta: dict = {"id": study.id, "series": {}}
    if study.truth is not None:
        meta["truth"] = {"edv_ml": study.truth.edv_ml, "esv_ml": study.truth.esv_ml}
    if study.age is not None:
        meta["age_years"] = study.age

    if study.sax is not None:
        meta["series"]["sax"] = {
            "positions": [_plane_meta(p, study.sax.n_frames) for p in study.sax.planes],
            "frame_count": study.sax.n_frames,
        }
        for i, frames in enumerate(study.sax.frames):
            d = root / "sax" / f"pos{i}"
            d.mkdir(parents=True, exist_ok=True)
            for j, fr in enumerate(frames):
                Image.fromarray(_to_uint16(fr)).save(d / f"frame{j}.png")
    for kind, series in ((SeriesKind.LAX_2CH, study.ch2), (SeriesKind.LAX_4CH, study.ch4)):
        if series is None:
            continue
        meta["series"][kind.value] = _plane_meta(series.planes[0], series.n_frames)
        d = root / kind.value
        d.mkdir(parents=True, exist_ok=True)
        for j, fr in enumerate(series.frames[0]):
            Image.fromarray(_to_uint16(fr)).save(d / f"frame{j}.png")
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


_FRAME_RE = re.compile(r"frame(\d+)\.png$")


def _read_frames(folder: Path, expected: int, where: str) -> np.ndarray:
    if not folder.is_dir():
        raise StudyFormatError(f"{where}: folder {folder} missing")
    files = sorted(
        (int(m.group(1)), p) for p in folder.iterdir() if (m := _FRAME_RE.search(p.name))
    )
    if len(files) != expected:
        raise FrameCountMismatch(f"{where}: sidecar declares {expected} frames, folder holds {len(files)}")
    if [i for i, _ in files] != list(range(expected)):
        raise FrameCountMismatch(f"{where}: frame indices are not 0..{expected - 1}")
    out = []
    for _, p in files:
        try:
            with Image.open(p) as im:
                arr = np.array(im)
        except OSError as exc:
            raise StudyFormatError(f"{where}: unreadable image {p.name} ({exc})") from None
        if arr.ndim != 2:
            raise StudyFormatError(f"{where}: {p.name} is not single-channel")
        out.append(arr.astype(np.float32))
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise StudyFormatError(f"{where}: frames have differing sizes {sorted(shapes)}")
    return np.stack(out)


def _build_plane(parts, shape, where) -> ImagePlane:
    spacing, origin, row, col, extent = parts
    if extent is not None and tuple(extent) != tuple(shape):
        raise StudyFormatError(f"{where}: declared extent {extent} differs from image size {shape}")
    try:
        return ImagePlane(np.array(origin), np.array(row), np.array(col), tuple(spacing), tuple(shape))
    except ValueError as exc:
        raise StudyFormatError(f"{where}: {exc}") from None


def load_study(path) -> Study:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise StudyFormatError(f"{root}: meta.json missing") from None
    except json.JSONDecodeError as exc:
        raise StudyFormatError(f"{root}: meta.json is not valid JSON ({exc})") from None
    if not isinstance(meta, dict) or not isinstance(meta.get("series"), dict):
        raise StudyFormatError(f"{root}: meta.json lacks a 'series' mapping")

    notes = []
    series_meta = meta["series"]
    sax = None
    if "sax" in series_meta:
        entries = series_meta["sax"].get("positions")
        if not isinstance(entries, list) or not entries:
            raise StudyFormatError(f"{root}: sax.positions must be a non-empty list")
        frames, planes = [], []
        for i, entry in enumerate(entries):
            where = f"{root.name}/sax/pos{i}"
            parts, count = _plane_from_meta(entry, where)
            fr = _read_frames(root / "sax" / f"pos{i}", count, where)
            frames.append(fr)
            planes.append(_build_plane(parts, fr.shape[1:], where))
        sax = Series(SeriesKind.SAX, tuple(frames), tuple(planes))
    else:
        notes.append("SAX series absent")

    lax = {}
    for kind in (SeriesKind.LAX_2CH, SeriesKind.LAX_4CH):
        entry = series_meta.get(kind.value)
        if entry is None:
            notes.append(f"{kind.value} series absent")
            lax[kind] = None
            continue
        where = f"{root.name}/{kind.value}"
        parts, count = _plane_from_meta(entry, where)
        fr = _read_frames(root / kind.value, count, where)
        lax[kind] = Series(kind, (fr,), (_build_plane(parts, fr.shape[1:], where),))

    truth = None
    if meta.get("truth") is not None:
        try:
            truth = Truth(float(meta["truth"]["edv_ml"]), float(meta["truth"]["esv_ml"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise StudyFormatError(f"{root}: malformed truth entry ({exc})") from None
    age = meta.get("age_years")
    return Study(
        id=str(meta.get("id", root.name)),
        sax=sax,
        ch2=lax[SeriesKind.LAX_2CH],
        ch4=lax[SeriesKind.LAX_4CH],
        truth=truth,
        age=None if age is None else float(age),
        notes=tuple(notes),
    )


def list_studies(root) -> list[Path]:
    """Study directories (those holding a meta.json) under ``root``, sorted."""
    return sorted(p for p in Path(root).iterdir() if (p / "meta.json").is_file())
