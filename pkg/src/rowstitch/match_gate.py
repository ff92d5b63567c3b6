"""Acceptance cascade deciding whether an ordered image pair can be stitched.

Stages, in order: stitching-edge pre-filter, robust fit, camera-motion check,
pruning of the worst-fitting inliers with a least-squares refit, and a final
RMS threshold.  Rejection is a normal outcome reported through
:class:`PairVerdict`, never an exception.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Axis, ImageRecord, MotionConstraints, PairVerdict, PipelineConfig, RejectReason, Transform2D
from .features import MatchSet
from .geometry import GeometryError, MotionSummary, decompose_motion, fit_model, ransac_fit, rms, transfer_errors


def filter_by_stitching_edge(
    m: MatchSet,
    dims_a: tuple[float, float],
    dims_b: tuple[float, float],
    axis: Axis = Axis.HORIZONTAL,
    sign: int = 1,
    edge_fraction: float = 0.25,
) -> MatchSet:
    """Keep matches lying near the forward edge of ``a`` and the trailing edge of ``b``."""
    if len(m) == 0:
        return m
    i = Axis(axis).index
    ext_a, ext_b = float(dims_a[i]), float(dims_b[i])
    ca, cb = m.points_a[:, i], m.points_b[:, i]
    if sign > 0:
        keep = (ca >= ext_a * (1.0 - edge_fraction)) & (cb <= ext_b * edge_fraction)
    else:
        keep = (ca <= ext_a * edge_fraction) & (cb >= ext_b * (1.0 - edge_fraction))
    return m.subset(keep)


def motion_ok(motion: MotionSummary, constraints: MotionConstraints, extent_px: float) -> bool:
    lo, hi = constraints.scale_bounds
    return (
        motion.t_along >= constraints.min_advance_for(extent_px)
        and abs(motion.t_ortho) <= constraints.max_ortho_ratio * motion.t_along
        and lo <= motion.scale <= hi
        and abs(motion.rotation_deg) <= constraints.max_rotation_deg
    )


def _reject(reason: RejectReason, matches: MatchSet, counts, rms_px=math.inf, inliers=0, motion=None,
            transform=None) -> PairVerdict:
    return PairVerdict(False, transform, matches, rms_px, reason, inliers, motion, tuple(counts))


def accept_pair(a: ImageRecord, b: ImageRecord, raw: MatchSet, cfg: PipelineConfig) -> PairVerdict:
    """Run the cascade on matches from earlier image ``a`` to later image ``b``.

    The resulting transform maps pixels of ``b`` into the frame of ``a``.
    ``stage_counts`` records the match count after each executed stage.
    """
    mc = cfg.motion
    axis, sign = mc.stitch_axis, mc.stitch_sign
    extent = float(a.dims[axis.index])
    counts = [len(raw)]

    edge = filter_by_stitching_edge(raw, a.dims, b.dims, axis, sign, cfg.edge_fraction)
    counts.append(len(edge))
    if len(edge) < cfg.min_prefilter_matches:
        return _reject(RejectReason.TOO_FEW_PREFILTER, edge, counts)

    kind = cfg.fit_kind
    try:
        fit = ransac_fit(edge.points_b, edge.points_a, kind, cfg.ransac_threshold_px, cfg.ransac_iterations,
                         cfg.ransac_seed)
    except GeometryError:
        return _reject(RejectReason.TOO_FEW_INLIERS, edge, counts)
    inl = edge.subset(fit.inlier_mask)
    counts.append(len(inl))
    if len(inl) < cfg.min_inliers:
        return _reject(RejectReason.TOO_FEW_INLIERS, inl, counts, fit.rms_px, len(inl), transform=fit.transform)

    try:
        motion = decompose_motion(fit.transform, b.width, b.height, axis, sign)
    except GeometryError:
        return _reject(RejectReason.MOTION_VIOLATION, inl, counts, fit.rms_px, len(inl), transform=fit.transform)
    if not motion_ok(motion, mc, extent):
        return _reject(RejectReason.MOTION_VIOLATION, inl, counts, fit.rms_px, len(inl), motion, fit.transform)

    errors = transfer_errors(fit.transform, inl.points_b, inl.points_a)
    n_drop = math.ceil(cfg.prune_fraction * len(inl))
    keep = np.ones(len(inl), dtype=bool)
    if n_drop:
        keep[np.argsort(-errors, kind="stable")[:n_drop]] = False
    survivors = inl.subset(keep)
    counts.append(len(survivors))
    try:
        refined = fit_model(kind, survivors.points_b, survivors.points_a)
    except GeometryError:
        return _reject(RejectReason.TOO_FEW_INLIERS, survivors, counts, fit.rms_px, len(inl), motion,
                       fit.transform)

    final_rms = rms(transfer_errors(refined, survivors.points_b, survivors.points_a))
    try:
        final_motion = decompose_motion(refined, b.width, b.height, axis, sign)
    except GeometryError:
        return _reject(RejectReason.MOTION_VIOLATION, survivors, counts, final_rms, len(inl), motion, refined)
    if final_rms > cfg.max_rms_px:
        return _reject(RejectReason.RMS_TOO_HIGH, survivors, counts, final_rms, len(inl), final_motion, refined)
    if not motion_ok(final_motion, mc, extent):
        return _reject(RejectReason.MOTION_VIOLATION, survivors, counts, final_rms, len(inl), final_motion,
                       refined)
    return PairVerdict(True, refined, survivors, final_rms, RejectReason.NONE, len(inl), final_motion,
                       tuple(counts))


def verdict_log_line(a_id: str, b_id: str, v: PairVerdict) -> str:
    """``a_id b_id verdict inliers rms t_along t_ortho scale rot_deg``."""
    verdict = "accepted" if v.accepted else v.reject_reason.value
    if v.motion is not None:
        mo = v.motion
        tail = f"{mo.t_along:.3f} {mo.t_ortho:.3f} {mo.scale:.6f} {mo.rotation_deg:.4f}"
    else:
        tail = "nan nan nan nan"
    r = "nan" if not math.isfinite(v.rms_px) else f"{v.rms_px:.4f}"
    return f"{a_id} {b_id} {verdict} {v.inliers} {r} {tail}"


def identity_verdict(t: Transform2D, matches: MatchSet) -> PairVerdict:
    """Accepted verdict wrapping a known transform (used by tests and synthetic runs)."""
    return PairVerdict(True, t, matches, 0.0, RejectReason.NONE, len(matches), None, (len(matches),))
