"""Planar transform estimation and motion analysis.

All fitters take ``(n, 2)`` arrays ``src``/``dst`` and return a
:class:`Transform2D` mapping ``src`` onto ``dst``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Axis, Transform2D, TransformKind, apply_matrix


class GeometryError(ValueError):
    pass


class TooFewPointsError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class RansacError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class FitResult:
    transform: Transform2D
    inlier_mask: np.ndarray
    rms_px: float

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


@dataclass(frozen=True)
class MotionSummary:
    t_along: float
    t_ortho: float
    rotation_deg: float
    scale: float


def _as_points(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.size == 0:
        return a.reshape(0, 2)
    return a.reshape(-1, 2)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _dlt_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Design matrix rows for ``b ~ H a`` (works on stacked leading dims)."""
    x, y = a[..., 0], a[..., 1]
    u, v = b[..., 0], b[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _has_collinear_triple(pts: np.ndarray, tol: float) -> bool:
    for i, j, k in itertools.combinations(range(len(pts)), 3):
        d1, d2 = pts[j] - pts[i], pts[k] - pts[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol:
            return True
    return False


def fit_homography_dlt(src, dst) -> Transform2D:
    """Normalized direct linear transform from four or more correspondences."""
    a, b = _as_points(src), _as_points(dst)
    if len(a) != len(b):
        raise GeometryError("point lists differ in length")
    if len(a) < 4:
        raise TooFewPointsError(f"homography needs 4 correspondences, got {len(a)}")
    ta, tb = _normalizer(a), _normalizer(b)
    an, bn = apply_matrix(ta, a), apply_matrix(tb, b)
    if len(a) == 4 and (_has_collinear_triple(an, 1e-9) or _has_collinear_triple(bn, 1e-9)):
        raise DegenerateConfigurationError("three of four points are collinear")
    A = _dlt_rows(an, bn)
    _, s, vt = np.linalg.svd(A)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError("design matrix is rank deficient")
    hn = vt[-1].reshape(3, 3)
    if abs(np.linalg.det(hn)) < 1e-12 * np.abs(hn).max() ** 3:
        raise DegenerateConfigurationError("fitted homography is singular")
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) < 1e-15:
        raise DegenerateConfigurationError("homography maps the origin to infinity")
    h = h / h[2, 2]
    return Transform2D(h, TransformKind.HOMOGRAPHY)


def _similarity_params(a: np.ndarray, b: np.ndarray):
    """Least-squares (s cos, s sin, tx, ty) for point sets on the last two axes."""
    ma = a.mean(axis=-2, keepdims=True)
    mb = b.mean(axis=-2, keepdims=True)
    ac, bc = a - ma, b - mb
    var = (ac ** 2).sum(axis=(-2, -1))
    p = (ac[..., 0] * bc[..., 0] + ac[..., 1] * bc[..., 1]).sum(axis=-1)
    q = (ac[..., 0] * bc[..., 1] - ac[..., 1] * bc[..., 0]).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = p / var
        s = q / var
    tx = mb[..., 0, 0] - (c * ma[..., 0, 0] - s * ma[..., 0, 1])
    ty = mb[..., 0, 1] - (s * ma[..., 0, 0] + c * ma[..., 0, 1])
    return c, s, tx, ty, var


def fit_partial_affine(src, dst) -> Transform2D:
    """Least-squares similarity (uniform scale, rotation, translation)."""
    a, b = _as_points(src), _as_points(dst)
    if len(a) != len(b):
        raise GeometryError("point lists differ in length")
    if len(a) < 2:
        raise TooFewPointsError(f"similarity needs 2 correspondences, got {len(a)}")
    c, s, tx, ty, var = _similarity_params(a, b)
    if var <= 1e-18 * max(1.0, float(np.abs(a).max()) ** 2):
        raise DegenerateConfigurationError("all source points coincide")
    if c * c + s * s < 1e-24:
        raise DegenerateConfigurationError("fitted similarity has zero scale")
    m = np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])
    return Transform2D(m, TransformKind.PARTIAL_AFFINE)


def fit_translation(src, dst) -> Transform2D:
    """Component-wise median displacement."""
    a, b = _as_points(src), _as_points(dst)
    if len(a) != len(b):
        raise GeometryError("point lists differ in length")
    if len(a) == 0:
        raise TooFewPointsError("translation needs at least one correspondence")
    d = np.median(b - a, axis=0)
    return Transform2D.translation(float(d[0]), float(d[1]))


def fit_model(kind: TransformKind, src, dst) -> Transform2D:
    kind = TransformKind(kind)
    if kind is TransformKind.HOMOGRAPHY:
        return fit_homography_dlt(src, dst)
    if kind is TransformKind.PARTIAL_AFFINE:
        return fit_partial_affine(src, dst)
    return fit_translation(src, dst)


def transfer_errors(t: Transform2D | np.ndarray, src, dst) -> np.ndarray:
    """Symmetric transfer error ``0.5 * (|t(src) - dst| + |t^-1(dst) - src|)``."""
    m = t.m if isinstance(t, Transform2D) else np.asarray(t, dtype=np.float64)
    a, b = _as_points(src), _as_points(dst)
    if len(a) == 0:
        return np.zeros(0)
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        raise GeometryError("transform is not invertible") from None
    if not np.all(np.isfinite(inv)):
        raise GeometryError("transform is not invertible")
    fwd = np.linalg.norm(apply_matrix(m, a) - b, axis=1)
    bwd = np.linalg.norm(apply_matrix(inv, b) - a, axis=1)
    return 0.5 * (fwd + bwd)


def rms(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(values ** 2)))


def reprojection_errors(t: Transform2D, matches) -> tuple[np.ndarray, float]:
    """Per-pair symmetric transfer errors of ``t`` (a-side to b-side) and their RMS."""
    e = transfer_errors(t, matches.points_a, matches.points_b)
    return e, rms(e)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def _sample_indices(rng: np.random.Generator, n: int, k: int, iterations: int) -> np.ndarray:
    """``iterations`` rows of ``k`` distinct indices in ``[0, n)``."""
    idx = rng.integers(0, n, size=(iterations, k))
    for _ in range(1000):
        srt = np.sort(idx, axis=1)
        dup = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), k))
    raise RuntimeError("could not draw distinct samples")


def _hypotheses(kind: TransformKind, a: np.ndarray, b: np.ndarray, samples: np.ndarray):
    """Vectorized minimal fits.  Returns ``(matrices, ok)``."""
    sa, sb = a[samples], b[samples]
    n = len(samples)
    mats = np.tile(np.eye(3), (n, 1, 1))
    if kind is TransformKind.TRANSLATION:
        d = sb[:, 0] - sa[:, 0]
        mats[:, 0, 2], mats[:, 1, 2] = d[:, 0], d[:, 1]
        return mats, np.ones(n, dtype=bool)
    if kind is TransformKind.PARTIAL_AFFINE:
        c, s, tx, ty, var = _similarity_params(sa, sb)
        ok = (var > 1e-12) & (c * c + s * s > 1e-12)
        mats[:, 0, 0], mats[:, 0, 1], mats[:, 0, 2] = c, -s, tx
        mats[:, 1, 0], mats[:, 1, 1], mats[:, 1, 2] = s, c, ty
        mats[~ok] = np.eye(3)
        return mats, ok
    ta, tb = _normalizer(a), _normalizer(b)
    an, bn = apply_matrix(ta, a), apply_matrix(tb, b)
    A = _dlt_rows(an[samples], bn[samples])  # (n, 8, 9)
    _, sv, vt = np.linalg.svd(A)
    h = vt[:, -1].reshape(n, 3, 3)
    h = np.linalg.inv(tb)[None] @ h @ ta[None]
    ok = (sv[:, 7] > 1e-8 * sv[:, 0]) & (np.abs(h[:, 2, 2]) > 1e-15)
    # three collinear source or target points give a singular model
    for pts in (an[samples], bn[samples]):
        for i, j, k in itertools.combinations(range(4), 3):
            d1, d2 = pts[:, j] - pts[:, i], pts[:, k] - pts[:, i]
            ok &= np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) > 1e-6
    h[ok] /= h[ok, 2, 2][:, None, None]
    h[~ok] = np.eye(3)
    det = np.linalg.det(h)
    ok &= np.abs(det) > 1e-12 * np.abs(h).max(axis=(1, 2)) ** 3
    h[~ok] = np.eye(3)
    return h, ok


def _batched_transfer_errors(mats: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(mats)

    def project(m, p):
        x = np.einsum("hij,nj->hni", m[:, :2, :2], p) + m[:, None, :2, 2]
        w = np.einsum("hj,nj->hn", m[:, 2, :2], p) + m[:, None, 2, 2]
        return x / w[..., None]

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        fwd = np.linalg.norm(project(mats, a) - b[None], axis=2)
        bwd = np.linalg.norm(project(inv, b) - a[None], axis=2)
        e = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(e), e, np.inf)


def _score(errors: np.ndarray, ok: np.ndarray, threshold: float):
    inl = errors <= threshold
    counts = np.where(ok, inl.sum(axis=1), -1)
    sq = np.where(inl, errors, 0.0) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        rmses = np.sqrt(sq.sum(axis=1) / np.maximum(counts, 1))
    return counts, rmses


def ransac_fit(
    src,
    dst,
    kind: TransformKind,
    threshold_px: float,
    iterations: int,
    seed: int,
    early_exit: bool = False,
    batch: int = 500,
) -> FitResult:
    """Robust fit of ``kind`` mapping ``src`` to ``dst``.

    Minimal samples are drawn with a Philox counter-based generator seeded by
    ``seed``.  The best hypothesis maximizes the inlier count (symmetric
    transfer error <= ``threshold_px``), ties going to the lower inlier RMS
    and then to the earlier iteration.  When the number of distinct minimal
    subsets does not exceed ``iterations`` every subset is evaluated instead.
    The winner is refit by least squares on its inliers.
    """
    kind = TransformKind(kind)
    a, b = _as_points(src), _as_points(dst)
    n, k = len(a), kind.min_samples
    if len(b) != n:
        raise GeometryError("point lists differ in length")
    if n < k:
        raise TooFewPointsError(f"{kind.value} needs {k} correspondences, got {n}")
    if threshold_px <= 0:
        raise GeometryError("threshold must be positive")

    if math.comb(n, k) <= iterations:
        all_samples = np.array(list(itertools.combinations(range(n), k)), dtype=np.intp)
        sampler = None
        total = len(all_samples)
    else:
        sampler = np.random.Generator(np.random.Philox(seed))
        total = iterations

    best = (-1, np.inf, -1)
    best_mat = None
    done = 0
    while done < total:
        size = min(batch, total - done)
        if sampler is None:
            samples = all_samples[done:done + size]
        else:
            samples = _sample_indices(sampler, n, k, size)
        mats, ok = _hypotheses(kind, a, b, samples)
        errs = _batched_transfer_errors(mats, a, b)
        counts, rmses = _score(errs, ok, threshold_px)
        order = np.lexsort((np.arange(size), rmses, -counts))
        i = order[0]
        cand = (int(counts[i]), float(rmses[i]), done + int(i))
        if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best, best_mat = cand, mats[i]
        done += size
        if early_exit and best[0] >= 0.9 * n:
            break

    if best_mat is None or best[0] < k:
        raise RansacError(f"no hypothesis reached {k} inliers")

    inliers = transfer_errors(best_mat, a, b) <= threshold_px
    model = Transform2D(best_mat, kind)
    try:
        refit = fit_model(kind, a[inliers], b[inliers])
        refit_inliers = transfer_errors(refit, a, b) <= threshold_px
        if refit_inliers.sum() >= k:
            model, inliers = refit, refit_inliers
    except GeometryError:
        pass
    e = transfer_errors(model, a[inliers], b[inliers])
    return FitResult(model, inliers, rms(e))


# ---------------------------------------------------------------------------
# Motion
# ---------------------------------------------------------------------------


def jacobian_at(m: np.ndarray, point) -> np.ndarray:
    """2x2 Jacobian of the projective map ``m`` at ``point``."""
    x, y = float(point[0]), float(point[1])
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    return (m[:2, :2] - np.outer([u, v], m[2, :2])) / w


def decompose_motion(t: Transform2D, width: float, height: float, axis: Axis = Axis.HORIZONTAL,
                     sign: int = 1) -> MotionSummary:
    """Displacement of the image center plus rotation/scale of the local Jacobian."""
    m = t.m
    if not np.isfinite(np.linalg.cond(m)) or abs(np.linalg.det(m)) < 1e-300:
        raise GeometryError("transform is not invertible")
    axis = Axis(axis)
    c = np.array([width / 2.0, height / 2.0])
    d = apply_matrix(m, c[None])[0] - c
    i = axis.index
    along = float(d[i]) * sign
    ortho = float(d[1 - i]) * sign
    J = jacobian_at(m, c)
    det = np.linalg.det(J)
    if det <= 0:
        raise GeometryError("transform flips orientation at the image center")
    u, _, vt = np.linalg.svd(J)
    r = u @ vt
    rot = math.degrees(math.atan2(r[1, 0], r[0, 0]))
    if rot <= -180.0:
        rot += 360.0
    return MotionSummary(along, ortho, rot, math.sqrt(det))
