"""Tests for the stitching-edge filter and the pair acceptance cascade."""

from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import record
from rowstitch.core import Axis, PipelineConfig, RejectReason, TransformKind, validate_config
from rowstitch.features import MatchSet, detect_features, match_features
from rowstitch.geometry import ransac_fit, transfer_errors
from rowstitch.match_gate import accept_pair, filter_by_stitching_edge, motion_ok, verdict_log_line
from rowstitch.synth import SceneSpec, generate_scene

W, H = 640, 480


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=3, row_length_px=1400, row_height_px=H))


def shifted_pair(scene: np.ndarray, shift: int, x0: int = 100):
    a = record(np.ascontiguousarray(scene[:, x0:x0 + W]), 0, "a")
    b = record(np.ascontiguousarray(scene[:, x0 + shift:x0 + shift + W]), 1, "b")
    return a, b


def gate_detected(a, b, cfg: PipelineConfig):
    fa = detect_features(a.pixels, cfg.feature_max_per_cell, cfg.feature_grid)
    fb = detect_features(b.pixels, cfg.feature_max_per_cell, cfg.feature_grid)
    raw = match_features(fa, fb, cfg.max_hamming, cfg.match_ratio)
    return raw, accept_pair(a, b, raw, cfg)


def blank(idx: int, name: str):
    return record(np.zeros((H, W, 3), np.uint8), idx, name)


def drift_matches(d_along: float, d_ortho: float, n: int = 80, seed: int = 0) -> MatchSet:
    """Exact matches with ``p_a = p_b + (d_along, d_ortho)`` inside the edge bands."""
    g = np.random.default_rng(seed)
    pb = np.column_stack([g.uniform(100, 160, n), g.uniform(0, 60, n)])
    return MatchSet.from_points(pb + [d_along, d_ortho], pb)


# ---------------------------------------------------------------------------
# Edge filter
# ---------------------------------------------------------------------------


class TestEdgeFilter:
    def test_kept_and_removed(self):
        m = MatchSet.from_points([[900, 10], [400, 10]], [[50, 10], [50, 10]])
        out = filter_by_stitching_edge(m, (1000, 500), (1000, 500), Axis.HORIZONTAL, 1, 0.25)
        np.testing.assert_array_equal(out.points_a, [[900, 10]])

    def test_half_fraction_grid(self):
        xs = np.arange(5.0, 1000.0, 10.0)
        pa = np.array([(x, 0.0) for x in xs for _ in xs])
        pb = np.array([(x, 0.0) for _ in xs for x in xs])
        out = filter_by_stitching_edge(MatchSet.from_points(pa, pb), (1000, 10), (1000, 10), Axis.HORIZONTAL, 1, 0.5)
        # 50 columns per half, every combination of a right-half and a left-half point
        assert len(out) == 50 * 50
        assert np.all(out.points_a[:, 0] >= 500) and np.all(out.points_b[:, 0] <= 500)

    def test_reverse_sign_and_vertical(self):
        m = MatchSet.from_points([[5, 10], [5, 90]], [[5, 95], [5, 5]])
        out = filter_by_stitching_edge(m, (10, 100), (10, 100), Axis.VERTICAL, -1, 0.25)
        np.testing.assert_array_equal(out.points_a, [[5, 10]])

    def test_empty(self):
        assert len(filter_by_stitching_edge(MatchSet.empty(), (10, 10), (10, 10))) == 0


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------


class TestAcceptPair:
    def test_rendered_shift_accepted(self, scene):
        cfg = validate_config({"edge_fraction": 0.5})
        a, b = shifted_pair(scene, int(0.3 * W))
        _, v = gate_detected(a, b, cfg)
        assert v.accepted, v.reject_reason
        assert abs(v.motion.t_along - 0.3 * W) <= 1.0
        assert abs(v.motion.t_ortho) <= 1.0

    def test_default_edge_band_needs_half_width_shift(self, scene):
        cfg = validate_config(None)
        a, b = shifted_pair(scene, int(0.3 * W))
        assert gate_detected(a, b, cfg)[1].reject_reason is RejectReason.TOO_FEW_PREFILTER
        a, b = shifted_pair(scene, int(0.75 * W))
        _, v = gate_detected(a, b, cfg)
        assert v.accepted
        assert abs(v.motion.t_along - 0.75 * W) <= 1.0

    def test_diagonal_drift_is_motion_violation(self):
        v = accept_pair(blank(0, "a"), blank(1, "b"), drift_matches(400, 400), validate_config(None))
        assert v.reject_reason is RejectReason.MOTION_VIOLATION
        assert not v.accepted

    def test_undercount_is_too_few_prefilter(self):
        v = accept_pair(blank(0, "a"), blank(1, "b"), drift_matches(400, 0, n=10), validate_config(None))
        assert v.reject_reason is RejectReason.TOO_FEW_PREFILTER
        assert v.transform is None and v.stage_counts == (10, 10)

    def test_inconsistent_matches_too_few_inliers(self):
        g = np.random.default_rng(2)
        pb = np.column_stack([g.uniform(0, 150, 80), g.uniform(0, H, 80)])
        pa = np.column_stack([g.uniform(500, W, 80), g.uniform(0, H, 80)])
        v = accept_pair(blank(0, "a"), blank(1, "b"), MatchSet.from_points(pa, pb), validate_config(None))
        assert v.reject_reason is RejectReason.TOO_FEW_INLIERS

    def test_noisy_matches_rms_too_high(self):
        g = np.random.default_rng(4)
        m = drift_matches(400, 0, n=200, seed=4)
        noisy = MatchSet.from_points(m.points_a + g.normal(0, 2.2, m.points_a.shape), m.points_b)
        cfg = validate_config({"max_rms_px": 0.5, "ransac_threshold_px": 8.0})
        v = accept_pair(blank(0, "a"), blank(1, "b"), noisy, cfg)
        assert v.reject_reason is RejectReason.RMS_TOO_HIGH

    def test_partial_affine_mode(self):
        cfg = validate_config({"warp_mode": "partial_affine"})
        v = accept_pair(blank(0, "a"), blank(1, "b"), drift_matches(420, 5), cfg)
        assert v.accepted
        assert v.transform.kind in (TransformKind.PARTIAL_AFFINE, TransformKind.TRANSLATION)
        np.testing.assert_allclose(v.transform.m[:2, 2], [420, 5], atol=1e-6)


@pytest.fixture(scope="module")
def gated(scene):
    cfg = validate_config(None)
    a, b = shifted_pair(scene, 470)
    raw, v = gate_detected(a, b, cfg)
    return cfg, a, b, raw, v


class TestCascadeInvariants:
    def test_counts_non_increasing(self, gated):
        *_, v = gated
        assert v.accepted
        assert len(v.stage_counts) == 4
        assert all(x >= y for x, y in zip(v.stage_counts, v.stage_counts[1:]))

    def test_accepted_is_rechecked(self, gated):
        cfg, a, b, _, v = gated
        errors = transfer_errors(v.transform, v.matches.points_b, v.matches.points_a)
        assert math.sqrt(np.mean(errors ** 2)) <= cfg.max_rms_px
        assert motion_ok(v.motion, cfg.motion, W)

    def test_pruning_removed_worst(self, gated):
        cfg, a, b, raw, v = gated
        edge = filter_by_stitching_edge(raw, a.dims, b.dims, edge_fraction=cfg.edge_fraction)
        fit = ransac_fit(edge.points_b, edge.points_a, cfg.fit_kind, cfg.ransac_threshold_px,
                         cfg.ransac_iterations, cfg.ransac_seed)
        inl = edge.subset(fit.inlier_mask)
        err = transfer_errors(fit.transform, inl.points_b, inl.points_a)
        kept = np.isin(inl.index_a, v.matches.index_a)
        assert kept.sum() == len(v.matches) == len(inl) - math.ceil(cfg.prune_fraction * len(inl))
        assert err[~kept].min() >= err[kept].max()

    def test_deterministic(self, gated):
        cfg, a, b, raw, v = gated
        v2 = accept_pair(a, b, raw, cfg)
        assert np.array_equal(v.transform.m, v2.transform.m)
        assert v.stage_counts == v2.stage_counts


def test_verdict_log_line_fields(scene):
    v = accept_pair(blank(0, "a"), blank(1, "b"), drift_matches(400, 0, n=10), validate_config(None))
    assert verdict_log_line("a", "b", v) == "a b too_few_prefilter 0 nan nan nan nan nan"
    fields = verdict_log_line("a", "b", accept_pair(blank(0, "a"), blank(1, "b"), drift_matches(420, 5),
                                                    validate_config(None))).split()
    assert fields[:3] == ["a", "b", "accepted"] and len(fields) == 9
    assert float(fields[5]) == pytest.approx(420, abs=1e-3)
