"""Straighten a wavy mosaic into a constant-height rectangle.

The mask's per-column extent gives a midline; the midline is simplified into
straight segments, and each segment's trapezoid (vertical sides at the
breakpoints) is warped onto a rectangle whose width equals the midline arc
length.  Because each trapezoid has parallel vertical sides, its projective
map is affine along every vertical line, so neighbouring slices sample their
shared edge at identical source coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .batch_stitcher import MosaicCanvas
from .core import Transform2D, apply_matrix
from .geometry import fit_homography_dlt
from .imaging import bilinear_sample, to_uint8


class StraightenError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Midline:
    """Per-column samples ``(x, y_mid, y_top, y_bottom)`` in canvas coordinates.

    ``x`` holds column centers; ``x_start``/``x_end`` are the outer edges of
    the first and last valid columns.
    """

    samples: np.ndarray
    x_start: float
    x_end: float
    heights: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def y_mid(self) -> np.ndarray:
        return self.samples[:, 1]

    @property
    def y_top(self) -> np.ndarray:
        return self.samples[:, 2]

    @property
    def y_bottom(self) -> np.ndarray:
        return self.samples[:, 3]

    def at(self, xq) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolated ``(y_mid, y_top, y_bottom)`` at arbitrary x (clamped at the ends)."""
        return (np.interp(xq, self.x, self.y_mid), np.interp(xq, self.x, self.y_top),
                np.interp(xq, self.x, self.y_bottom))


@dataclass(frozen=True, eq=False)
class QuadSlice:
    corners: np.ndarray  # TL, TR, BR, BL in source canvas coordinates
    u0: float
    u1: float
    height: float
    rect_to_quad: np.ndarray
    quad_to_rect: np.ndarray


@dataclass(frozen=True, eq=False)
class StraightenMap:
    """Forward point map from the source canvas to the straightened output."""

    slices: tuple[QuadSlice, ...]
    out_width: int
    out_height: int

    def _slice_index(self, x: np.ndarray) -> np.ndarray:
        starts = np.array([s.corners[0, 0] for s in self.slices])
        return np.clip(np.searchsorted(starts, x, side="right") - 1, 0, len(self.slices) - 1)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        idx = self._slice_index(pts[:, 0])
        out = np.empty_like(pts)
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = apply_matrix(self.slices[i].quad_to_rect, pts[sel])
        return out

    def local_matrix(self, point) -> np.ndarray:
        """Projective map of the slice containing ``point``."""
        i = int(self._slice_index(np.array([float(point[0])]))[0])
        return self.slices[i].quad_to_rect


def _clamped_sample(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample with coordinates clamped to the hull of pixel centers (edge replication)."""
    h, w = src.shape[:2]
    vals, _ = bilinear_sample(src, np.clip(xs, 0.5, w - 0.5), np.clip(ys, 0.5, h - 0.5))
    return vals


def _moving_average(v: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(v) < 2:
        return v.astype(np.float64)
    return ndimage.uniform_filter1d(v.astype(np.float64), size=window, mode="nearest")


END_TRIM_FRACTION = 0.9


def extract_midline(canvas: MosaicCanvas, smooth_window: int = 51,
                    end_trim_fraction: float = END_TRIM_FRACTION) -> Midline:
    """Top/bottom mask edges and their mean per column, smoothed.

    End columns whose valid extent is below ``end_trim_fraction`` of the
    median column extent are trimmed, so slivers left by tilted end frames do
    not drag the midline.
    """
    valid = np.asarray(canvas.mask) > 0
    has = valid.any(axis=0)
    if not has.any():
        raise StraightenError("mask is empty")
    cols = np.nonzero(has)[0]
    c0, c1 = cols[0], cols[-1] + 1
    span = valid.shape[0] - np.argmax(valid[::-1], axis=0) - np.argmax(valid, axis=0)
    span = np.where(has, span, 0)
    full = np.nonzero(span >= end_trim_fraction * np.median(span[c0:c1]))[0]
    if len(full):
        c0, c1 = full[0], full[-1] + 1
    v = valid[:, c0:c1]
    filled = v.any(axis=0)
    h = v.shape[0]
    top = np.argmax(v, axis=0).astype(np.float64)
    bottom = (h - np.argmax(v[::-1], axis=0)).astype(np.float64)
    xs = np.arange(c0, c1) + 0.5
    if not filled.all():
        top = np.interp(xs, xs[filled], top[filled])
        bottom = np.interp(xs, xs[filled], bottom[filled])
    heights = bottom - top
    top_s = _moving_average(top, smooth_window)
    bot_s = _moving_average(bottom, smooth_window)
    mid_s = _moving_average((top + bottom) / 2.0, smooth_window)
    samples = np.column_stack([xs, mid_s, top_s, bot_s])
    return Midline(samples, float(c0), float(c1), heights)


def segment_midline(m: Midline, tolerance_px: float) -> np.ndarray:
    """Breakpoint x positions from endpoint-fit polyline simplification."""
    x, y = m.x, m.y_mid
    n = len(x)
    if n < 2:
        return np.array([m.x_start, m.x_end])
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        dx, dy = x[j] - x[i], y[j] - y[i]
        norm = np.hypot(dx, dy)
        seg_x, seg_y = x[i + 1:j] - x[i], y[i + 1:j] - y[i]
        dist = np.abs(dx * seg_y - dy * seg_x) / norm
        k = int(np.argmax(dist))
        if dist[k] > tolerance_px:
            split = i + 1 + k
            keep[split] = True
            stack.append((i, split))
            stack.append((split, j))
    bps = x[keep].copy()
    bps[0], bps[-1] = m.x_start, m.x_end
    return bps


def _arc_lengths(m: Midline, breakpoints: np.ndarray) -> np.ndarray:
    out = []
    for xa, xb in zip(breakpoints[:-1], breakpoints[1:]):
        inner = m.x[(m.x > xa) & (m.x < xb)]
        xs = np.concatenate([[xa], inner, [xb]])
        ys = m.at(xs)[0]
        out.append(float(np.hypot(np.diff(xs), np.diff(ys)).sum()))
    return np.array(out)


def plan_slices(m: Midline, breakpoints, height: float) -> StraightenMap:
    """Quadrilaterals between breakpoints and their target rectangles."""
    bps = np.asarray(breakpoints, dtype=np.float64)
    if len(bps) < 2:
        raise StraightenError("need at least two breakpoints")
    if height <= 0:
        raise StraightenError("output height must be positive")
    _, tops, bots = m.at(bps)
    if np.any(bots - tops <= 1e-9):
        raise StraightenError("degenerate quadrilateral: zero height at a breakpoint")
    arcs = _arc_lengths(m, bps)
    total = arcs.sum()
    out_w = max(int(round(total)), 1)
    u = np.concatenate([[0.0], np.cumsum(arcs)]) * (out_w / total)
    u[-1] = float(out_w)
    slices = []
    for i in range(len(bps) - 1):
        quad = np.array([[bps[i], tops[i]], [bps[i + 1], tops[i + 1]],
                         [bps[i + 1], bots[i + 1]], [bps[i], bots[i]]])
        rect = np.array([[u[i], 0.0], [u[i + 1], 0.0], [u[i + 1], height], [u[i], height]])
        fwd = fit_homography_dlt(quad, rect).m
        slices.append(QuadSlice(quad, float(u[i]), float(u[i + 1]), float(height), np.linalg.inv(fwd), fwd))
    return StraightenMap(tuple(slices), out_w, int(round(height)))


def slice_and_rectify(canvas: MosaicCanvas, m: Midline, breakpoints, height: float,
                      plan: StraightenMap | None = None) -> MosaicCanvas:
    """Warp each slice onto its rectangle; the output mask is the full rectangle."""
    plan = plan if plan is not None else plan_slices(m, breakpoints, height)
    out_w, out_h = plan.out_width, plan.out_height
    out = np.zeros((out_h, out_w, 3), dtype=np.uint8)
    rows = np.arange(out_h) + 0.5
    centers = np.arange(out_w) + 0.5
    for s in plan.slices:
        cols = np.nonzero((centers >= s.u0) & (centers < s.u1))[0]
        if s is plan.slices[-1]:
            cols = np.nonzero(centers >= s.u0)[0]
        if len(cols) == 0:
            continue
        gx, gy = np.meshgrid(centers[cols], rows)
        r2q = s.rect_to_quad
        den = r2q[2, 0] * gx + r2q[2, 1] * gy + r2q[2, 2]
        sx = (r2q[0, 0] * gx + r2q[0, 1] * gy + r2q[0, 2]) / den
        sy = (r2q[1, 0] * gx + r2q[1, 1] * gy + r2q[1, 2]) / den
        out[:, cols[0]:cols[-1] + 1] = to_uint8(_clamped_sample(canvas.pixels, sx, sy))
    mask = np.ones((out_h, out_w), dtype=np.uint8)
    rect = np.array([[0.0, 0.0], [out_w, 0.0], [out_w, out_h], [0.0, out_h]])
    return MosaicCanvas(out, mask, (0.0, 0.0), [rect])


def target_height(m: Midline) -> float:
    """Median per-column mask height."""
    return float(np.median(m.heights))


def straighten(canvas: MosaicCanvas, tolerance_px: float = 5.0, smooth_window: int = 51,
               height: float | None = None) -> tuple[MosaicCanvas, StraightenMap]:
    """Midline extraction, segmentation and rectification in one call."""
    m = extract_midline(canvas, smooth_window)
    bps = segment_midline(m, tolerance_px)
    h = target_height(m) if height is None else height
    plan = plan_slices(m, bps, round(h))
    return slice_and_rectify(canvas, m, bps, h, plan), plan


@dataclass(frozen=True)
class ScaleMap:
    sx: float
    sy: float

    @property
    def matrix(self) -> np.ndarray:
        return np.diag([self.sx, self.sy, 1.0])

    def map_points(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 2) * [self.sx, self.sy]


def rescale_to_height(canvas: MosaicCanvas, target_edge_px: float) -> tuple[MosaicCanvas, ScaleMap]:
    """Uniformly rescale a straightened canvas so its height equals ``target_edge_px``."""
    h, w = canvas.height, canvas.width
    if h == 0:
        raise StraightenError("canvas has zero height")
    new_h = int(round(target_edge_px))
    s = new_h / h
    new_w = max(int(round(w * s)), 1)
    if new_h == h and new_w == w:
        return canvas, ScaleMap(1.0, 1.0)
    sx, sy = new_w / w, new_h / h
    gx, gy = np.meshgrid((np.arange(new_w) + 0.5) / sx, (np.arange(new_h) + 0.5) / sy)
    vals = _clamped_sample(canvas.pixels, gx, gy)
    mvals = _clamped_sample(canvas.mask.astype(np.float32), gx, gy)
    fps = [fp * [sx, sy] for fp in canvas.footprints]
    return MosaicCanvas(to_uint8(vals), (mvals > 0.5).astype(np.uint8), canvas.origin_offset, fps), ScaleMap(sx, sy)


def as_transform(m: np.ndarray) -> Transform2D:
    return Transform2D.from_matrix(m)
