"""Tests for transform fitting, RANSAC, transfer errors and motion decomposition."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowstitch.core import Axis, Transform2D, TransformKind
from rowstitch.features import MatchSet
from rowstitch.geometry import (
    DegenerateConfigurationError,
    GeometryError,
    RansacError,
    TooFewPointsError,
    decompose_motion,
    fit_homography_dlt,
    fit_partial_affine,
    fit_translation,
    ransac_fit,
    reprojection_errors,
    transfer_errors,
)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def project(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = np.c_[pts, np.ones(len(pts))] @ m.T
    return q[:, :2] / q[:, 2:]


def rotation(deg: float) -> np.ndarray:
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1.0]])


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1.0]])


def random_homography(g: np.random.Generator, max_cond: float = 1e3) -> np.ndarray:
    while True:
        h = np.eye(3)
        h[:2, :2] += g.normal(0, 0.2, (2, 2))
        h[:2, 2] = g.uniform(-200, 200, 2)
        h[2, :2] = g.normal(0, 3e-4, 2)
        h /= h[2, 2]
        if np.linalg.cond(h) <= max_cond and np.linalg.det(h[:2, :2]) > 0.2:
            return h


def solve_h_plain(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Unnormalized 8x8 solve with h33 = 1, independent of the library DLT."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    try:
        h = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError:
        return None
    return np.append(h, 1.0).reshape(3, 3)


def oracle_inlier_count(m: np.ndarray, a: np.ndarray, b: np.ndarray, thr: float) -> int:
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        return -1
    e = 0.5 * (np.linalg.norm(project(m, a) - b, axis=1) + np.linalg.norm(project(inv, b) - a, axis=1))
    return int((e <= thr).sum())


def exhaustive_optimum(a: np.ndarray, b: np.ndarray, thr: float) -> int:
    best = 0
    for s in itertools.combinations(range(len(a)), 4):
        m = solve_h_plain(a[list(s)], b[list(s)])
        if m is not None:
            best = max(best, oracle_inlier_count(m, a, b, thr))
    return best


def outlier_instance(seed: int, n: int = 12, n_out: int = 4):
    g = np.random.default_rng(seed)
    a = g.uniform(0, 640, (n, 2))
    h = np.eye(3)
    h[:2, :2] += g.normal(0, 0.05, (2, 2))
    h[:2, 2] = g.uniform(-100, 100, 2)
    h[2, :2] = g.normal(0, 1e-4, 2)
    b = project(h, a) + g.normal(0, 0.5, (n, 2))
    out = g.choice(n, n_out, replace=False)
    b[out] = g.uniform(0, 640, (n_out, 2))
    return a, b


# ---------------------------------------------------------------------------
# Direct fits
# ---------------------------------------------------------------------------


class TestHomographyDLT:
    def test_identity(self):
        t = fit_homography_dlt(SQUARE, SQUARE)
        np.testing.assert_allclose(t.m, np.eye(3), atol=1e-10)

    def test_known_matrix(self):
        h = translation(100, 5) @ rotation(2)
        sq = SQUARE * 300
        t = fit_homography_dlt(sq, project(h, sq))
        assert np.abs(t.m - h).max() < 1e-8
        assert t.m[2, 2] == 1.0

    def test_collinear_is_degenerate(self):
        pts = np.array([[0, 0], [1, 1], [2, 2], [3, 3.0]])
        with pytest.raises(DegenerateConfigurationError):
            fit_homography_dlt(pts, pts + 1)

    def test_too_few_points_distinct(self):
        with pytest.raises(TooFewPointsError):
            fit_homography_dlt(SQUARE[:3], SQUARE[:3])

    def test_random_exact_eight_points(self):
        g = np.random.default_rng(44)
        for _ in range(100):
            h = random_homography(g)
            src = g.uniform(0, 640, (8, 2))
            t = fit_homography_dlt(src, project(h, src))
            assert np.abs(t.m - h).max() < 1e-8


class TestPartialAffine:
    def test_known_parameters(self):
        g = np.random.default_rng(1)
        src = g.uniform(0, 500, (30, 2))
        truth = Transform2D.similarity(1.1, math.radians(3), 50, -2)
        t = fit_partial_affine(src, truth.apply(src))
        assert t.kind is TransformKind.PARTIAL_AFFINE
        np.testing.assert_allclose(t.m, truth.m, atol=1e-9)

    def test_identical_sets(self):
        pts = np.array([[1.0, 2.0], [5.0, 9.0], [3.0, -4.0]])
        np.testing.assert_allclose(fit_partial_affine(pts, pts).m, np.eye(3), atol=1e-12)

    def test_two_pair_translation(self):
        t = fit_partial_affine([[0, 0], [10, 0]], [[4, 7], [14, 7]])
        assert t.kind is TransformKind.PARTIAL_AFFINE
        np.testing.assert_allclose(t.m, translation(4, 7), atol=1e-12)

    def test_coincident_sources(self):
        with pytest.raises(GeometryError):
            fit_partial_affine([[1, 1], [1, 1]], [[0, 0], [3, 3]])


class TestTranslation:
    def test_single_pair(self):
        np.testing.assert_allclose(fit_translation([[0, 0]], [[10, 3]]).m[:2, 2], [10, 3])

    def test_median_ignores_outliers(self):
        src = np.arange(22.0).reshape(11, 2)
        dst = src + np.array([10.0, 0.0])
        dst[[2, 7]] = src[[2, 7]] + np.array([200.0, 50.0])
        np.testing.assert_allclose(fit_translation(src, dst).m[:2, 2], [10, 0])

    def test_zero_displacement(self):
        pts = np.ones((5, 2))
        np.testing.assert_array_equal(fit_translation(pts, pts).m, np.eye(3))

    def test_empty(self):
        with pytest.raises(TooFewPointsError):
            fit_translation(np.zeros((0, 2)), np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class TestReprojection:
    def test_identity_zero(self):
        pts = np.random.default_rng(0).uniform(0, 10, (6, 2))
        e, r = reprojection_errors(Transform2D.identity(), MatchSet.from_points(pts, pts))
        assert np.all(e == 0) and r == 0

    def test_hand_computed(self):
        t = Transform2D.translation(10, 0)
        e, _ = reprojection_errors(t, MatchSet.from_points([[0, 0], [0, 0]], [[10, 0], [13, 4]]))
        np.testing.assert_allclose(e, [0.0, 5.0])

    def test_single_pair_rms(self):
        t = Transform2D.similarity(1.2, 0.3, 4, 5)
        e, r = reprojection_errors(t, MatchSet.from_points([[3, 4]], [[7, 1]]))
        assert r == pytest.approx(e[0])

    def test_non_invertible(self):
        m = np.array([[1.0, 2, 0], [2, 4, 0], [0, 0, 1]])
        with pytest.raises(GeometryError):
            transfer_errors(m, [[0, 0]], [[1, 1]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry_under_inverse(self, seed):
        g = np.random.default_rng(seed)
        h = random_homography(g)
        a = g.uniform(0, 300, (10, 2))
        b = g.uniform(0, 300, (10, 2))
        t = Transform2D.from_matrix(h)
        e1, _ = reprojection_errors(t, MatchSet.from_points(a, b))
        e2, _ = reprojection_errors(t.inverse(), MatchSet.from_points(b, a))
        np.testing.assert_allclose(e1, e2, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


class TestRansac:
    def test_exact_data_all_inliers(self):
        g = np.random.default_rng(3)
        h = random_homography(g)
        a = g.uniform(0, 640, (20, 2))
        r = ransac_fit(a, project(h, a), TransformKind.HOMOGRAPHY, 3.0, 500, 0)
        assert r.n_inliers == 20
        assert np.abs(r.transform.m - h).max() < 1e-6
        assert r.rms_px >= 0

    def test_outliers_marked(self):
        g = np.random.default_rng(9)
        h = translation(40, 3) @ rotation(4)
        a = g.uniform(0, 640, (20, 2))
        b = project(h, a)
        out = np.arange(15, 20)
        while True:
            b[out] = g.uniform(0, 640, (5, 2))
            if np.all(transfer_errors(h, a[out], b[out]) > 50):
                break
        r = ransac_fit(a, b, TransformKind.HOMOGRAPHY, 3.0, 1000, 1)
        np.testing.assert_array_equal(r.inlier_mask, np.arange(20) < 15)

    @pytest.mark.parametrize("iterations", [200, 494, math.comb(12, 4)])
    def test_matches_exhaustive_optimum(self, iterations):
        hits = 0
        for seed in range(20):
            a, b = outlier_instance(seed)
            r = ransac_fit(a, b, TransformKind.HOMOGRAPHY, 3.0, iterations, seed)
            hits += r.n_inliers == exhaustive_optimum(a, b, 3.0)
        assert hits == 20

    def test_bit_reproducible(self):
        a, b = outlier_instance(5, n=60, n_out=18)
        r1 = ransac_fit(a, b, TransformKind.HOMOGRAPHY, 3.0, 300, 7)
        r2 = ransac_fit(a.copy(), b.copy(), TransformKind.HOMOGRAPHY, 3.0, 300, 7)
        assert np.array_equal(r1.transform.m, r2.transform.m)
        assert np.array_equal(r1.inlier_mask, r2.inlier_mask)
        assert r1.rms_px == r2.rms_px

    @pytest.mark.parametrize("kind", list(TransformKind))
    def test_min_samples_honored(self, kind):
        a = np.zeros((kind.min_samples - 1, 2))
        with pytest.raises(TooFewPointsError):
            ransac_fit(a, a, kind, 3.0, 10, 0)

    def test_no_consensus(self):
        g = np.random.default_rng(0)
        a = g.uniform(0, 100, (2, 2))
        with pytest.raises(RansacError):
            # two coincident sources make every partial-affine hypothesis degenerate
            ransac_fit(np.array([[1.0, 1.0], [1.0, 1.0]]), a, TransformKind.PARTIAL_AFFINE, 1.0, 10, 0)

    def test_bad_threshold(self):
        with pytest.raises(GeometryError):
            ransac_fit(SQUARE, SQUARE, TransformKind.HOMOGRAPHY, 0.0, 10, 0)


# ---------------------------------------------------------------------------
# Motion decomposition
# ---------------------------------------------------------------------------


class TestDecomposeMotion:
    def test_pure_translation(self):
        mo = decompose_motion(Transform2D.translation(120, -8), 640, 480)
        assert (mo.t_along, mo.t_ortho, mo.rotation_deg, mo.scale) == pytest.approx((120, -8, 0, 1))

    def test_similarity(self):
        mo = decompose_motion(Transform2D.similarity(1.1, math.radians(5), 80, 0), 640, 480)
        assert mo.scale == pytest.approx(1.1, abs=1e-9)
        assert mo.rotation_deg == pytest.approx(5.0, abs=1e-9)

    def test_identity(self):
        mo = decompose_motion(Transform2D.identity(), 640, 480)
        assert (mo.t_along, mo.t_ortho, mo.rotation_deg, mo.scale) == (0, 0, 0, 1)

    def test_vertical_axis_and_sign(self):
        mo = decompose_motion(Transform2D.translation(3, -50), 640, 480, Axis.VERTICAL, -1)
        assert mo.t_along == pytest.approx(50) and mo.t_ortho == pytest.approx(-3)

    def test_singular_transform_unrepresentable(self):
        m = np.array([[1.0, 2, 0], [2, 4, 0], [0, 0, 1]])
        with pytest.raises(ValueError):
            Transform2D(m, TransformKind.HOMOGRAPHY)

    def test_mirror_rejected(self):
        m = np.diag([-1.0, 1.0, 1.0])
        with pytest.raises(GeometryError):
            decompose_motion(Transform2D(m, TransformKind.HOMOGRAPHY), 10, 10)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(0.8, 1.25), st.floats(-0.3, 0.3), st.floats(-300, 300), st.floats(-300, 300),
        st.floats(-100, 100), st.floats(-100, 100),
    )
    def test_extra_translation_adds(self, s, th, tx, ty, dx, dy):
        t = Transform2D.similarity(s, th, tx, ty)
        base = decompose_motion(t, 640, 480)
        moved = decompose_motion(Transform2D.translation(dx, dy) @ t, 640, 480)
        assert moved.t_along - base.t_along == pytest.approx(dx, abs=1e-8)
        assert moved.t_ortho - base.t_ortho == pytest.approx(dy, abs=1e-8)
        assert moved.scale == pytest.approx(base.scale) and moved.rotation_deg == pytest.approx(base.rotation_deg)
