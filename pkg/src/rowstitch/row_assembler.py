"""Join straightened batch mosaics end to end and straighten the result."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .batch_stitcher import MosaicCanvas
from .compositor import merge_into
from .core import Axis, PipelineConfig, Transform2D, TransformKind
from .features import detect_features, match_features
from .geometry import GeometryError, fit_translation, ransac_fit
from .straightener import ScaleMap, StraightenMap, rescale_to_height, straighten


class AssemblyError(RuntimeError):
    pass


@dataclass(eq=False)
class RowAssembly:
    """Final mosaic plus what is needed to map batch coordinates into it.

    ``offsets[k]`` is the integer placement of (rescaled) batch ``k`` in the
    unstraightened row canvas; ``scales[k]`` maps batch ``k``'s input canvas
    into its rescaled version.
    """

    canvas: MosaicCanvas
    row_canvas: MosaicCanvas
    offsets: list[np.ndarray]
    scales: list[ScaleMap]
    straighten_map: StraightenMap

    def map_points(self, k: int, points) -> np.ndarray:
        pts = self.scales[k].map_points(points) + self.offsets[k]
        return self.straighten_map.map_points(pts)

    def local_matrix(self, k: int, point) -> np.ndarray:
        """3x3 map from batch ``k``'s canvas to the final mosaic around ``point``."""
        mid = self.scales[k].map_points(point)[0] + self.offsets[k]
        shift = Transform2D.translation(*self.offsets[k]).m
        return self.straighten_map.local_matrix(mid) @ shift @ self.scales[k].matrix


def _edge_region(canvas: MosaicCanvas, forward: bool, axis: Axis, sign: int, frac: float):
    w, h = canvas.width, canvas.height
    extent = w if axis is Axis.HORIZONTAL else h
    band = max(int(np.ceil(extent * frac)), 1)
    # the forward edge lies at the high end of the axis when moving with sign +1
    high = forward == (sign > 0)
    lo, hi = (extent - band, extent) if high else (0, band)
    return (lo, 0, hi, h) if axis is Axis.HORIZONTAL else (0, lo, w, hi)


def match_batch_edges(batch_a: MosaicCanvas, batch_b: MosaicCanvas, cfg: PipelineConfig,
                      label: str = "") -> Transform2D:
    """Translation mapping ``batch_b`` pixels into ``batch_a``'s frame from edge features."""
    mc = cfg.motion
    axis, sign = mc.stitch_axis, mc.stitch_sign
    tag = f" ({label})" if label else ""
    fa = detect_features(batch_a.pixels, cfg.feature_max_per_cell, cfg.feature_grid,
                         region=_edge_region(batch_a, True, axis, sign, cfg.edge_fraction))
    fb = detect_features(batch_b.pixels, cfg.feature_max_per_cell, cfg.feature_grid,
                         region=_edge_region(batch_b, False, axis, sign, cfg.edge_fraction))
    m = match_features(fa, fb, cfg.max_hamming, cfg.match_ratio)
    if len(m) < cfg.min_inliers:
        raise AssemblyError(f"batch edge match{tag}: only {len(m)} matches")
    try:
        fit = ransac_fit(m.points_b, m.points_a, TransformKind.TRANSLATION, cfg.ransac_threshold_px,
                         cfg.ransac_iterations, cfg.ransac_seed)
    except GeometryError as exc:
        raise AssemblyError(f"batch edge match{tag}: {exc}") from None
    if fit.n_inliers < cfg.min_inliers:
        raise AssemblyError(f"batch edge match{tag}: only {fit.n_inliers} inliers")
    t = fit_translation(m.points_b[fit.inlier_mask], m.points_a[fit.inlier_mask])
    along = sign * t.m[axis.index, 2]
    extent = batch_a.width if axis is Axis.HORIZONTAL else batch_a.height
    if along < mc.min_advance_for(extent):
        raise AssemblyError(f"batch edge match{tag}: no forward advance ({along:.1f} px)")
    return t


def compose_row(batches: Sequence[MosaicCanvas], offsets: Sequence, cfg: PipelineConfig):
    """Paste batches at integer offsets, merging overlaps with seam and blend.

    Returns the row canvas and the offsets shifted so the canvas starts at 0.
    """
    offs = np.array([np.rint(np.asarray(o, dtype=np.float64)) for o in offsets])
    lo = offs.min(axis=0)
    offs = offs - lo
    ends = offs + np.array([[b.width, b.height] for b in batches])
    cw, ch = (int(v) for v in ends.max(axis=0))
    pixels = np.zeros((ch, cw, 3), dtype=np.uint8)
    mask = np.zeros((ch, cw), dtype=np.uint8)
    axis, sign = cfg.motion.stitch_axis, cfg.motion.stitch_sign
    for k, (b, (ox, oy)) in enumerate(zip(batches, offs.astype(int))):
        valid = b.mask > 0
        if k == 0:
            pixels[oy:oy + b.height, ox:ox + b.width][valid] = b.pixels[valid]
            mask[oy:oy + b.height, ox:ox + b.width] |= valid.astype(np.uint8)
            continue
        if not merge_into(pixels, mask, b.pixels, valid, oy, ox, cfg.blend_levels, axis, sign):
            raise AssemblyError(f"batch {k} does not overlap its predecessor")
    rects = [np.array([[x, y], [x + b.width, y], [x + b.width, y + b.height], [x, y + b.height]], float)
             for b, (x, y) in zip(batches, offs)]
    return MosaicCanvas(pixels, mask, (0.0, 0.0), rects), [o for o in offs]


def assemble_row_detailed(batches: Sequence[MosaicCanvas], cfg: PipelineConfig, threads: int = 1) -> RowAssembly:
    if not batches:
        raise AssemblyError("no batches to assemble")
    target = float(np.median([b.height for b in batches]))
    scaled, scales = [], []
    for b in batches:
        s, sm = rescale_to_height(b, target)
        scaled.append(s)
        scales.append(sm)

    def edge(k):
        return match_batch_edges(scaled[k], scaled[k + 1], cfg, label=f"batches {k}-{k + 1}")

    pairs = range(len(scaled) - 1)
    if threads > 1 and len(scaled) > 2:
        with ThreadPoolExecutor(threads) as pool:
            links = list(pool.map(edge, pairs))
    else:
        links = [edge(k) for k in pairs]
    offsets = [np.zeros(2)]
    for t in links:
        # round each link so a batch's placement only depends on integer steps
        offsets.append(offsets[-1] + np.rint(t.m[:2, 2]))
    row, offsets = compose_row(scaled, offsets, cfg)
    final, plan = straighten(row, cfg.straighten_tolerance_px, cfg.smooth_window, height=target)
    return RowAssembly(final, row, offsets, scales, plan)


def assemble_row(batches: Sequence[MosaicCanvas], cfg: PipelineConfig, threads: int = 1) -> MosaicCanvas:
    """Match batch edges, place batches by cumulative translation, merge and straighten."""
    return assemble_row_detailed(batches, cfg, threads).canvas
