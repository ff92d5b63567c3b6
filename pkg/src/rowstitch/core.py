"""Shared domain types and pipeline configuration.

Coordinate convention used everywhere: continuous pixel coordinates with the
origin at the top-left corner of the top-left pixel, x to the right and y
downward.  Pixel ``(row, col)`` therefore has its center at
``(col + 0.5, row + 0.5)`` and an image of size ``w x h`` spans
``[0, w] x [0, h]``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

MIN_IMAGE_SIDE = 64


class ConfigError(ValueError):
    """Raised when a configuration value violates its invariant."""

    def __init__(self, field_name: str, value: Any, message: str):
        self.field_name = field_name
        self.value = value
        super().__init__(f"{field_name}={value!r}: {message}")


class Axis(str, enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"

    @property
    def index(self) -> int:
        """Coordinate index (0 for x, 1 for y) of the stitch direction."""
        return 0 if self is Axis.HORIZONTAL else 1


class WarpMode(str, enum.Enum):
    PERSPECTIVE = "perspective"
    PARTIAL_AFFINE = "partial_affine"


class TransformKind(str, enum.Enum):
    TRANSLATION = "translation"
    PARTIAL_AFFINE = "partial_affine"
    HOMOGRAPHY = "homography"

    @property
    def min_samples(self) -> int:
        return {"translation": 1, "partial_affine": 2, "homography": 4}[self.value]


class RejectReason(str, enum.Enum):
    NONE = "none"
    TOO_FEW_PREFILTER = "too_few_prefilter"
    TOO_FEW_INLIERS = "too_few_inliers"
    MOTION_VIOLATION = "motion_violation"
    RMS_TOO_HIGH = "rms_too_high"


@dataclass(frozen=True)
class GeoRecord:
    latitude: float
    longitude: float
    along_row_m: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One captured frame.  ``pixels`` is an ``(h, w, 3)`` uint8 RGB array."""

    id: str
    seq_index: int
    pixels: np.ndarray
    geo: GeoRecord | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"{self.id}: pixels must be (h, w, 3) uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < MIN_IMAGE_SIDE or px.shape[1] < MIN_IMAGE_SIDE:
            raise ValueError(f"{self.id}: image {px.shape[1]}x{px.shape[0]} smaller than {MIN_IMAGE_SIDE} px")
        if self.seq_index < 0:
            raise ValueError(f"{self.id}: negative seq_index {self.seq_index}")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height


_SHAPE_TOL = 1e-6


def _classify(m: np.ndarray, tol: float = 1e-9) -> TransformKind:
    if abs(m[2, 0]) > tol or abs(m[2, 1]) > tol or abs(m[2, 2] - 1.0) > tol:
        return TransformKind.HOMOGRAPHY
    a = m[:2, :2]
    if np.all(np.abs(a - np.eye(2)) <= tol):
        return TransformKind.TRANSLATION
    if abs(a[0, 0] - a[1, 1]) <= tol and abs(a[0, 1] + a[1, 0]) <= tol:
        return TransformKind.PARTIAL_AFFINE
    return TransformKind.HOMOGRAPHY


@dataclass(frozen=True, eq=False)
class Transform2D:
    """A planar projective transform acting on ``(x, y)`` points.

    The matrix is normalized so that ``m[2, 2] == 1``.  ``kind`` records the
    most specific model the matrix belongs to; composing or inverting keeps
    the kind of the more general operand.
    """

    m: np.ndarray
    kind: TransformKind = TransformKind.HOMOGRAPHY

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("transform has non-finite entries")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        kind = TransformKind(self.kind)
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e15:
            raise ValueError("transform is not invertible")
        if kind is not TransformKind.HOMOGRAPHY and abs(np.linalg.det(m[:2, :2])) < 1e-12:
            raise ValueError("transform is not invertible")
        if kind is not TransformKind.HOMOGRAPHY:
            # accept rounding noise only, then snap to the exact shape
            tol = _SHAPE_TOL * max(1.0, float(np.abs(m[:2, :2]).max()))
            a, b = (m[0, 0] + m[1, 1]) / 2.0, (m[1, 0] - m[0, 1]) / 2.0
            target = np.eye(2) if kind is TransformKind.TRANSLATION else np.array([[a, -b], [b, a]])
            if np.abs(m[:2, :2] - target).max() > tol or np.abs(m[2, :2]).max() > tol:
                raise ValueError(f"matrix does not have the shape of a {kind.value} transform")
            m[:2, :2] = target
            m[2] = (0.0, 0.0, 1.0)
        m.flags.writeable = False
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "kind", kind)

    @classmethod
    def identity(cls, kind: TransformKind = TransformKind.TRANSLATION) -> Transform2D:
        return cls(np.eye(3), kind)

    @classmethod
    def translation(cls, tx: float, ty: float) -> Transform2D:
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return cls(m, TransformKind.TRANSLATION)

    @classmethod
    def similarity(cls, scale: float, theta_rad: float, tx: float, ty: float) -> Transform2D:
        c, s = math.cos(theta_rad) * scale, math.sin(theta_rad) * scale
        return cls(np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]]), TransformKind.PARTIAL_AFFINE)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Transform2D:
        """Wrap a matrix and classify it as the most specific kind."""
        m = np.asarray(m, dtype=np.float64)
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        return cls(m, _classify(m))

    @property
    def is_affine(self) -> bool:
        return self.kind is not TransformKind.HOMOGRAPHY or bool(
            abs(self.m[2, 0]) < 1e-12 and abs(self.m[2, 1]) < 1e-12
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an ``(n, 2)`` array of points."""
        return apply_matrix(self.m, points)

    def inverse(self) -> Transform2D:
        return Transform2D(np.linalg.inv(self.m), self.kind)

    def __matmul__(self, other: Transform2D) -> Transform2D:
        """``(self @ other)(p) == self(other(p))``."""
        kinds = [self.kind, other.kind]
        kind = max(kinds, key=lambda k: k.min_samples)
        return Transform2D(self.m @ other.m, kind)

    def conforms(self, tol: float = 1e-9) -> bool:
        """True when the matrix has the shape its kind promises."""
        m = self.m
        if self.kind is TransformKind.HOMOGRAPHY:
            return True
        if np.any(np.abs(m[2] - (0.0, 0.0, 1.0)) > tol):
            return False
        if self.kind is TransformKind.TRANSLATION:
            return bool(np.all(np.abs(m[:2, :2] - np.eye(2)) <= tol))
        return bool(abs(m[0, 0] - m[1, 1]) <= tol and abs(m[0, 1] + m[1, 0]) <= tol)

    def __repr__(self) -> str:
        rows = "; ".join(" ".join(f"{v:.6g}" for v in r) for r in self.m)
        return f"Transform2D({self.kind.value}: [{rows}])"


def apply_matrix(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = pts @ m[:2, :2].T + m[:2, 2]
    w = pts @ m[2, :2] + m[2, 2]
    return x / w[:, None]


@dataclass(frozen=True)
class MotionConstraints:
    stitch_axis: Axis = Axis.HORIZONTAL
    stitch_sign: int = 1
    # None means 5% of the image extent along the stitch axis.
    min_advance_px: float | None = None
    max_ortho_ratio: float = 0.5
    scale_bounds: tuple[float, float] = (0.8, 1.25)
    max_rotation_deg: float = 15.0

    def min_advance_for(self, extent_px: float) -> float:
        if self.min_advance_px is not None:
            return self.min_advance_px
        return 0.05 * extent_px


@dataclass(frozen=True)
class PipelineConfig:
    window: int = 5
    batch_size: int = 10
    edge_fraction: float = 0.25
    min_prefilter_matches: int = 50
    ransac_threshold_px: float = 3.0
    ransac_iterations: int = 2000
    ransac_seed: int = 0
    min_inliers: int = 15
    prune_fraction: float = 0.2
    max_rms_px: float = 3.0
    warp_mode: WarpMode = WarpMode.PARTIAL_AFFINE
    blend_levels: int = 5
    straighten_tolerance_px: float = 5.0
    motion: MotionConstraints = field(default_factory=MotionConstraints)
    # detector / matcher / straightener knobs
    feature_grid: int = 8
    feature_max_per_cell: int = 40
    max_hamming: int = 64
    match_ratio: float = 0.85
    smooth_window: int = 51

    @property
    def fit_kind(self) -> TransformKind:
        if self.warp_mode is WarpMode.PERSPECTIVE:
            return TransformKind.HOMOGRAPHY
        return TransformKind.PARTIAL_AFFINE


def _is_int(v: Any) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def _check(cond: bool, name: str, value: Any, message: str):
    if not cond:
        raise ConfigError(name, value, message)


def _validate_motion(raw: MotionConstraints | dict | None) -> MotionConstraints:
    if raw is None:
        return MotionConstraints()
    if isinstance(raw, dict):
        known = {f.name for f in dataclasses.fields(MotionConstraints)}
        for key in raw:
            _check(key in known, f"motion.{key}", raw[key], "unknown key")
        raw = MotionConstraints(**raw)
    try:
        axis = Axis(raw.stitch_axis)
    except ValueError:
        raise ConfigError("motion.stitch_axis", raw.stitch_axis, "must be horizontal or vertical") from None
    _check(raw.stitch_sign in (1, -1) and _is_int(raw.stitch_sign), "motion.stitch_sign", raw.stitch_sign,
           "must be +1 or -1")
    if raw.min_advance_px is not None:
        _check(_is_num(raw.min_advance_px) and raw.min_advance_px > 0, "motion.min_advance_px",
               raw.min_advance_px, "must be > 0")
    _check(_is_num(raw.max_ortho_ratio) and raw.max_ortho_ratio > 0, "motion.max_ortho_ratio",
           raw.max_ortho_ratio, "must be > 0")
    bounds = tuple(raw.scale_bounds)
    _check(len(bounds) == 2 and all(_is_num(b) for b in bounds) and 0 < bounds[0] <= 1 <= bounds[1],
           "motion.scale_bounds", raw.scale_bounds, "must satisfy 0 < min <= 1 <= max")
    _check(_is_num(raw.max_rotation_deg) and 0 < raw.max_rotation_deg < 90, "motion.max_rotation_deg",
           raw.max_rotation_deg, "must lie in (0, 90)")
    return dataclasses.replace(
        raw,
        stitch_axis=axis,
        stitch_sign=int(raw.stitch_sign),
        min_advance_px=None if raw.min_advance_px is None else float(raw.min_advance_px),
        max_ortho_ratio=float(raw.max_ortho_ratio),
        scale_bounds=(float(bounds[0]), float(bounds[1])),
        max_rotation_deg=float(raw.max_rotation_deg),
    )


def validate_config(raw: PipelineConfig | dict | None = None) -> PipelineConfig:
    """Check every invariant and return a normalized configuration.

    Accepts a ``PipelineConfig`` or a mapping of field names (as read from a
    config file).  Missing fields take their defaults.  The first violated
    invariant raises :class:`ConfigError` naming the field.
    """
    if raw is None:
        raw = PipelineConfig()
    if isinstance(raw, dict):
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        for key in raw:
            _check(key in known, key, raw[key], "unknown key")
        values = dict(raw)
        values["motion"] = _validate_motion(values.get("motion"))
        raw = PipelineConfig(**values)

    c = raw
    _check(_is_int(c.window) and c.window >= 1, "window", c.window, "must be an integer >= 1")
    _check(_is_int(c.batch_size) and c.batch_size >= 3, "batch_size", c.batch_size, "must be an integer >= 3")
    _check(_is_num(c.edge_fraction) and 0 < c.edge_fraction <= 0.5, "edge_fraction", c.edge_fraction,
           "must lie in (0, 0.5]")
    _check(_is_int(c.min_prefilter_matches) and c.min_prefilter_matches >= 4, "min_prefilter_matches",
           c.min_prefilter_matches, "must be an integer >= 4")
    _check(_is_num(c.ransac_threshold_px) and c.ransac_threshold_px > 0, "ransac_threshold_px",
           c.ransac_threshold_px, "must be > 0")
    _check(_is_int(c.ransac_iterations) and c.ransac_iterations >= 1, "ransac_iterations", c.ransac_iterations,
           "must be an integer >= 1")
    _check(_is_int(c.ransac_seed) and 0 <= c.ransac_seed < 2**64, "ransac_seed", c.ransac_seed,
           "must be a 64-bit unsigned integer")
    _check(_is_int(c.min_inliers) and c.min_inliers >= 4, "min_inliers", c.min_inliers, "must be an integer >= 4")
    _check(_is_num(c.prune_fraction) and 0 <= c.prune_fraction <= 0.5, "prune_fraction", c.prune_fraction,
           "must lie in [0, 0.5]")
    _check(_is_num(c.max_rms_px) and c.max_rms_px > 0, "max_rms_px", c.max_rms_px, "must be > 0")
    try:
        warp_mode = WarpMode(c.warp_mode)
    except ValueError:
        raise ConfigError("warp_mode", c.warp_mode, "must be perspective or partial_affine") from None
    _check(_is_int(c.blend_levels) and c.blend_levels >= 1, "blend_levels", c.blend_levels,
           "must be an integer >= 1")
    _check(_is_num(c.straighten_tolerance_px) and c.straighten_tolerance_px > 0, "straighten_tolerance_px",
           c.straighten_tolerance_px, "must be > 0")
    _check(_is_int(c.feature_grid) and c.feature_grid >= 1, "feature_grid", c.feature_grid, "must be >= 1")
    _check(_is_int(c.feature_max_per_cell) and c.feature_max_per_cell >= 1, "feature_max_per_cell",
           c.feature_max_per_cell, "must be >= 1")
    _check(_is_int(c.max_hamming) and 0 <= c.max_hamming <= 256, "max_hamming", c.max_hamming,
           "must lie in [0, 256]")
    _check(_is_num(c.match_ratio) and 0 < c.match_ratio <= 1, "match_ratio", c.match_ratio, "must lie in (0, 1]")
    _check(_is_int(c.smooth_window) and c.smooth_window >= 1, "smooth_window", c.smooth_window, "must be >= 1")

    return dataclasses.replace(
        c,
        edge_fraction=float(c.edge_fraction),
        ransac_threshold_px=float(c.ransac_threshold_px),
        ransac_seed=int(c.ransac_seed),
        prune_fraction=float(c.prune_fraction),
        max_rms_px=float(c.max_rms_px),
        warp_mode=warp_mode,
        straighten_tolerance_px=float(c.straighten_tolerance_px),
        match_ratio=float(c.match_ratio),
        motion=_validate_motion(c.motion),
    )


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML config file; ``None`` yields the defaults."""
    if path is None:
        return validate_config()
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", type(data).__name__, "config must be a key-value mapping")
    if isinstance(data.get("motion"), dict) and "scale_bounds" in data["motion"]:
        data["motion"]["scale_bounds"] = tuple(data["motion"]["scale_bounds"])
    return validate_config(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Plain mapping suitable for writing back out as YAML."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, MotionConstraints):
            v = {
                g.name: (getattr(v, g.name).value if isinstance(getattr(v, g.name), enum.Enum)
                         else list(getattr(v, g.name)) if isinstance(getattr(v, g.name), tuple)
                         else getattr(v, g.name))
                for g in dataclasses.fields(v)
            }
        out[f.name] = v
    return out


@dataclass(frozen=True, eq=False)
class PairVerdict:
    """Outcome of gating one ordered image pair.

    ``transform`` maps pixels of the later image into the earlier image's
    frame, so forward camera motion shows up as a positive along-axis shift.
    ``matches`` holds the surviving matches (all of them on rejection at the
    stage that rejected).
    """

    accepted: bool
    transform: Transform2D | None
    matches: Any
    rms_px: float
    reject_reason: RejectReason
    inliers: int = 0
    motion: Any = None
    stage_counts: tuple[int, ...] = ()

    def __post_init__(self):
        if self.accepted:
            if self.transform is None or self.reject_reason is not RejectReason.NONE:
                raise ValueError("accepted verdict needs a transform and no reject reason")
        elif self.reject_reason is RejectReason.NONE:
            raise ValueError("rejected verdict needs a reject reason")
