"""Image-plane geometry: pixel/world mapping and plane intersections.

Conventions: ``row_dir`` is the world direction in which the row index grows,
``col_dir`` the direction in which the column index grows, and
``spacing = (mm per row step, mm per column step)``.  All world coordinates
are millimetres in a right-handed patient frame.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParallelError

PARALLEL_TOL = 1e-6


def _vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ImagePlane:
    origin: np.ndarray
    row_dir: np.ndarray
    col_dir: np.ndarray
    spacing: tuple[float, float]
    extent: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "row_dir", _vec3(self.row_dir))
        object.__setattr__(self, "col_dir", _vec3(self.col_dir))
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "extent", (int(self.extent[0]), int(self.extent[1])))
        for v in (self.origin, self.row_dir, self.col_dir):
            v.flags.writeable = False
        if abs(np.linalg.norm(self.row_dir) - 1) > 1e-9 or abs(np.linalg.norm(self.col_dir) - 1) > 1e-9:
            raise GeometryError("direction cosines must be unit vectors")
        if abs(float(self.row_dir @ self.col_dir)) > 1e-6:
            raise GeometryError("row and column directions must be orthogonal")
        if min(self.spacing) <= 0:
            raise GeometryError("pixel spacing must be positive")

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return (
            np.array_equal(self.origin, other.origin)
            and np.array_equal(self.row_dir, other.row_dir)
            and np.array_equal(self.col_dir, other.col_dir)
            and self.spacing == other.spacing
            and self.extent == other.extent
        )

    __hash__ = None

    @property
    def normal(self) -> np.ndarray:
        return plane_normal(self)

    def pixel_to_world(self, row, col) -> np.ndarray:
        return pixel_to_world(self, row, col)

    def world_to_pixel(self, p) -> tuple[float, float]:
        return world_to_pixel(self, p)

    def residual(self, p) -> float:
        """Signed distance (mm) of a world point from this plane."""
        return float((_vec3(p) - self.origin) @ self.normal)


@dataclass(frozen=True, eq=False)
class Line3D:
    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = _vec3(self.direction)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("line direction must be non-zero")
        object.__setattr__(self, "point", _vec3(self.point))
        object.__setattr__(self, "direction", d / n)

    def at(self, t) -> np.ndarray:
        return self.point + np.multiply.outer(np.asarray(t, dtype=float), self.direction)


def plane_normal(plane: ImagePlane) -> np.ndarray:
    n = np.cross(plane.row_dir, plane.col_dir)
    norm = np.linalg.norm(n)
    if norm < PARALLEL_TOL:
        raise GeometryError("row and column directions are (nearly) parallel")
    return n / norm


def pixel_to_world(plane: ImagePlane, row, col) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    col = np.asarray(col, dtype=float)
    return (
        plane.origin
        + np.multiply.outer(row * plane.spacing[0], plane.row_dir)
        + np.multiply.outer(col * plane.spacing[1], plane.col_dir)
    )


def world_to_pixel(plane: ImagePlane, p) -> tuple[float, float]:
    d = np.asarray(p, dtype=float) - plane.origin
    return float(d @ plane.row_dir) / plane.spacing[0], float(d @ plane.col_dir) / plane.spacing[1]


def intersect_planes(a: ImagePlane, b: ImagePlane) -> Line3D:
    """Line shared by two non-parallel planes.

    The returned point is the one on the line closest to the midpoint of the
    two plane origins, which keeps it in the neighbourhood of the images.
    """
    na, nb = plane_normal(a), plane_normal(b)
    direction = np.cross(na, nb)
    s = np.linalg.norm(direction)
    if s <= PARALLEL_TOL:
        raise ParallelError("planes are parallel; no unique intersection line")
    direction /= s
    # Solve na.x = da, nb.x = db, direction.x = direction.anchor
    anchor = 0.5 * (a.origin + b.origin)
    A = np.stack([na, nb, direction])
    rhs = np.array([na @ a.origin, nb @ b.origin, direction @ anchor])
    point = np.linalg.solve(A, rhs)
    return Line3D(point, direction)


def intersect_line_plane(line: Line3D, plane: ImagePlane) -> np.ndarray:
    n = plane_normal(plane)
    denom = float(line.direction @ n)
    if abs(denom) <= PARALLEL_TOL:
        raise ParallelError("line is parallel to the plane")
    t = float((plane.origin - line.point) @ n) / denom
    return line.point + t * line.direction


class OutOfExtentWarning(UserWarning):
    pass


def coarse_center(sax: ImagePlane, ch2: ImagePlane, ch4: ImagePlane) -> tuple[float, float]:
    """Coarse LV centre on a short-axis image from the long-axis planes.

    The 2CH and 4CH planes meet along (approximately) the LV long axis; that
    line pierces the short-axis plane near the cavity centre.
    """
    axis = intersect_planes(ch2, ch4)
    hit = intersect_line_plane(axis, sax)
    row, col = world_to_pixel(sax, hit)
    rows, cols = sax.extent
    if not (0 <= row <= rows - 1 and 0 <= col <= cols - 1):
        warnings.warn(
            f"coarse centre ({row:.1f}, {col:.1f}) lies outside the {rows}x{cols} image",
            OutOfExtentWarning,
            stacklevel=2,
        )
    return row, col


def long_axis_point(ch2: ImagePlane, ch4: ImagePlane, sax: ImagePlane) -> np.ndarray:
    """World point where the long axis crosses ``sax``."""
    return intersect_line_plane(intersect_planes(ch2, ch4), sax)
