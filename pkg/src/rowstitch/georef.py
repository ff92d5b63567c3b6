"""Control points, axis regressions and mosaic fidelity statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import GeoRecord, Transform2D

EARTH_M_PER_DEG = 111_320.0


class GeorefError(ValueError):
    pass


@dataclass(frozen=True)
class ControlPoint:
    label: str
    pixel: tuple[float, float]
    world: GeoRecord | float | None = None


@dataclass(frozen=True)
class RegressionReport:
    """Fit of pixel coordinate against a reference coordinate.

    ``intercept`` is 0 for fits through the origin; ``mae_cm`` is None when no
    metric calibration was available.
    """

    slope: float
    intercept: float
    r_squared: float
    mae_px: float
    mae_cm: float | None
    n: int
    skipped: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise GeorefError("a regression needs at least two points")

    def to_text(self) -> str:
        cm = "nan" if self.mae_cm is None else f"{self.mae_cm:.6f}"
        return (f"slope {self.slope:.9g}\nintercept {self.intercept:.9g}\nr_squared {self.r_squared:.9g}\n"
                f"mae_px {self.mae_px:.6f}\nmae_cm {cm}\nn {self.n}\nskipped {self.skipped}\n")


def register_image_centers(maps: Sequence, images: Sequence) -> tuple[list[ControlPoint], int]:
    """Map each image center through its composed pipeline map.

    ``maps[i]`` is a :class:`Transform2D` or any object with ``map_points``.
    Images without geo data are skipped; returns the points and skip count.
    """
    if len(maps) != len(images):
        raise GeorefError("need one map per image")
    out, skipped = [], 0
    for mp, img in zip(maps, images):
        if img.geo is None:
            skipped += 1
            continue
        center = np.array([[img.width / 2.0, img.height / 2.0]])
        p = mp.apply(center)[0] if isinstance(mp, Transform2D) else np.asarray(mp.map_points(center))[0]
        out.append(ControlPoint(img.id, (float(p[0]), float(p[1])), img.geo))
    return out, skipped


def _r_squared(y: np.ndarray, resid: np.ndarray, centered: bool) -> float:
    ss_res = float(resid @ resid)
    base = y - y.mean() if centered else y
    ss_tot = float(base @ base)
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return float(min(max(1.0 - ss_res / ss_tot, 0.0), 1.0))


def _fit(x: np.ndarray, y: np.ndarray, with_intercept: bool):
    if with_intercept:
        xc = x - x.mean()
        sxx = float(xc @ xc)
        if sxx == 0.0:
            raise GeorefError("reference coordinates have zero variance")
        slope = float(xc @ (y - y.mean())) / sxx
        intercept = float(y.mean() - slope * x.mean())
    else:
        sxx = float(x @ x)
        if sxx == 0.0:
            raise GeorefError("reference coordinates are all zero")
        slope = float(x @ y) / sxx
        intercept = 0.0
    resid = y - (slope * x + intercept)
    return slope, intercept, resid


def fit_axis_regression(points: Sequence[tuple[float, float]], with_intercept: bool = True,
                        skipped: int = 0) -> RegressionReport:
    """Least-squares fit of pixel position on world position (meters).

    ``mae_cm`` converts the mean absolute pixel residual through the ratio of
    world range to pixel range.
    """
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise GeorefError("a regression needs at least two points")
    w, p = arr[:, 0], arr[:, 1]
    if np.ptp(w) == 0.0:
        raise GeorefError("world coordinates have zero variance")
    slope, intercept, resid = _fit(w, p, with_intercept)
    mae_px = float(np.mean(np.abs(resid)))
    span_px = float(np.ptp(p))
    mae_cm = mae_px * 100.0 * float(np.ptp(w)) / span_px if span_px > 0 else None
    return RegressionReport(slope, intercept, _r_squared(p, resid, with_intercept), mae_px, mae_cm, len(arr),
                            skipped)


def compare_control_points(run_a: Sequence[ControlPoint], run_b: Sequence[ControlPoint],
                           px_per_m: float | None = None, axis: int = 0) -> RegressionReport:
    """Through-origin regression of run_b on run_a along ``axis`` over shared labels.

    The MAE is the mean Euclidean distance between matched pixel positions.
    """
    b_by_label = {cp.label: cp for cp in run_b}
    pairs = [(cp.pixel, b_by_label[cp.label].pixel) for cp in run_a if cp.label in b_by_label]
    if len(pairs) < 2:
        raise GeorefError(f"need at least two label-matched control points, found {len(pairs)}")
    pa = np.array([p for p, _ in pairs], dtype=np.float64)
    pb = np.array([q for _, q in pairs], dtype=np.float64)
    x, y = pa[:, axis], pb[:, axis]
    if float(x @ x) == 0.0:
        raise GeorefError("reference coordinates are all zero")
    slope = float(x @ y) / float(x @ x)
    resid = y - slope * x
    mae_px = float(np.mean(np.linalg.norm(pb - pa, axis=1)))
    mae_cm = mae_px / px_per_m * 100.0 if px_per_m else None
    return RegressionReport(slope, 0.0, _r_squared(y, resid, False), mae_px, mae_cm, len(pairs),
                            len(run_a) - len(pairs))


def along_row_meters(geos: Sequence[GeoRecord]) -> np.ndarray:
    """Project lat/lon onto the principal direction of the point cloud.

    Uses a local equirectangular approximation; the result starts at 0 for the
    first record and increases toward the last.
    """
    if len(geos) == 0:
        return np.zeros(0)
    lat = np.array([g.latitude for g in geos], dtype=np.float64)
    lon = np.array([g.longitude for g in geos], dtype=np.float64)
    lat0 = math.radians(float(lat.mean()))
    xy = np.column_stack([(lon - lon[0]) * EARTH_M_PER_DEG * math.cos(lat0), (lat - lat[0]) * EARTH_M_PER_DEG])
    if len(geos) == 1:
        return np.zeros(1)
    centered = xy - xy.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    d = vt[0]
    proj = xy @ d
    if proj[-1] < proj[0]:
        proj = -proj
    return proj - proj[0]


def world_positions(points: Sequence[ControlPoint]) -> np.ndarray:
    """Along-row meters for control points whose ``world`` is a GeoRecord or a float."""
    if all(isinstance(cp.world, GeoRecord) for cp in points):
        return along_row_meters([cp.world for cp in points])
    if all(isinstance(cp.world, (int, float)) for cp in points):
        return np.array([float(cp.world) for cp in points])
    raise GeorefError("control points lack consistent world coordinates")


def georeference_report(points: Sequence[ControlPoint], skipped: int = 0, axis: int = 0) -> RegressionReport:
    world = world_positions(points)
    px = [cp.pixel[axis] for cp in points]
    return fit_axis_regression(list(zip(world, px)), with_intercept=True, skipped=skipped)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _data_lines(path: str | Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s.split()


def read_geo_sidecar(path: str | Path) -> dict[str, GeoRecord]:
    """``id latitude longitude`` per line."""
    out = {}
    for lineno, parts in _data_lines(path):
        if len(parts) != 3:
            raise GeorefError(f"{path}:{lineno}: expected 'id latitude longitude'")
        try:
            out[parts[0]] = GeoRecord(float(parts[1]), float(parts[2]))
        except ValueError as exc:
            raise GeorefError(f"{path}:{lineno}: {exc}") from None
    return out


def read_control_points(path: str | Path) -> list[ControlPoint]:
    """``label x y [lat lon]`` per line."""
    out = []
    for lineno, parts in _data_lines(path):
        if len(parts) not in (3, 5):
            raise GeorefError(f"{path}:{lineno}: expected 'label x y [lat lon]'")
        try:
            world = GeoRecord(float(parts[3]), float(parts[4])) if len(parts) == 5 else None
            out.append(ControlPoint(parts[0], (float(parts[1]), float(parts[2])), world))
        except ValueError as exc:
            raise GeorefError(f"{path}:{lineno}: {exc}") from None
    return out


def write_control_points(path: str | Path, points: Sequence[ControlPoint]) -> None:
    with open(path, "w") as fh:
        for cp in points:
            line = f"{cp.label} {cp.pixel[0]:.6f} {cp.pixel[1]:.6f}"
            if isinstance(cp.world, GeoRecord):
                line += f" {cp.world.latitude:.10f} {cp.world.longitude:.10f}"
            fh.write(line + "\n")
