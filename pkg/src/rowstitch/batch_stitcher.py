"""Turn one batch of linked images into a composited batch mosaic.

Link convention: a link transform maps pixels of the later image into the
earlier image's frame, so the global placement of image ``k`` is
``G[k] = G[k-1] @ link[k-1]``, with ``G[0]`` the identity (the gauge).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .compositor import CompositeError, merge_into
from .core import Axis, ImageRecord, PipelineConfig, Transform2D, TransformKind
from .geometry import fit_partial_affine
from .imaging import image_corners, transformed_corners, warp_to_grid
from .sequencer import Batch

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PlacedImage:
    image_id: str
    global_transform: Transform2D
    width: int
    height: int

    @property
    def footprint(self) -> np.ndarray:
        return transformed_corners(self.global_transform.m, self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        return self.global_transform.apply(np.array([[self.width / 2.0, self.height / 2.0]]))[0]

    def moved(self, t: Transform2D) -> PlacedImage:
        """Placement with ``t`` applied after the current transform."""
        return replace(self, global_transform=t @ self.global_transform)


@dataclass(eq=False)
class MosaicCanvas:
    """Composited pixels plus validity mask.

    Canvas pixel ``(r, c)`` has its center at mosaic-frame coordinates
    ``(c + 0.5 - ox, r + 0.5 - oy)`` where ``(ox, oy) = origin_offset``.
    """

    pixels: np.ndarray
    mask: np.ndarray
    origin_offset: tuple[float, float] = (0.0, 0.0)
    footprints: list[np.ndarray] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_canvas(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) + np.asarray(self.origin_offset)


@dataclass
class RefineInfo:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    costs: list[float]


def _bbox_offset(placements: Sequence[PlacedImage]) -> Transform2D:
    pts = np.concatenate([p.footprint for p in placements])
    lo = pts.min(axis=0)
    return Transform2D.translation(-lo[0], -lo[1])


def normalize_offsets(placements: Sequence[PlacedImage]) -> list[PlacedImage]:
    """Translate all placements so the footprint bounding box starts at (0, 0)."""
    t = _bbox_offset(placements)
    return [p.moved(t) for p in placements]


def chain_global_transforms(batch: Batch, images: Sequence[ImageRecord]) -> list[PlacedImage]:
    """Compose link transforms along the batch.

    ``images`` are the batch's images in chain order.
    """
    if len(images) != len(batch.indices):
        raise ValueError("image count does not match batch")
    g = Transform2D.identity()
    out = [PlacedImage(images[0].id, g, images[0].width, images[0].height)]
    for img, link in zip(images[1:], batch.links):
        if link.transform is None:
            raise ValueError("batch contains a link without a transform")
        try:
            link.transform.inverse()
        except ValueError:
            raise ValueError(f"link into {img.id} is not invertible") from None
        g = g @ link.transform
        out.append(PlacedImage(img.id, g, img.width, img.height))
    return normalize_offsets(out)


# ---------------------------------------------------------------------------
# Joint refinement
# ---------------------------------------------------------------------------


def _sim_matrix(p: np.ndarray) -> np.ndarray:
    a, b, tx, ty = p
    return np.array([[a, -b, tx], [b, a, ty], [0.0, 0.0, 1.0]])


def _sim_params(m: np.ndarray) -> np.ndarray:
    return np.array([m[0, 0], m[1, 0], m[0, 2], m[1, 2]])


def _apply_sim(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ m[:2, :2].T + m[:2, 2]


class _LinkProblem:
    def __init__(self, gauge: np.ndarray, links: list[tuple[np.ndarray, np.ndarray]]):
        self.gauge = gauge
        self.links = links

    def matrices(self, params: np.ndarray) -> list[np.ndarray]:
        mats = [self.gauge]
        for k in range(len(self.links)):
            mats.append(_sim_matrix(params[4 * k:4 * k + 4]))
        return mats

    def residuals(self, params: np.ndarray) -> np.ndarray:
        mats = self.matrices(params)
        res = []
        for k, (pa, pb) in enumerate(self.links):
            rel = np.linalg.solve(mats[k], mats[k + 1])  # later -> earlier
            inv = np.linalg.inv(rel)
            res.append((_apply_sim(rel, pb) - pa).ravel())
            res.append((_apply_sim(inv, pa) - pb).ravel())
        return np.concatenate(res)

    def cost(self, params: np.ndarray) -> float:
        r = self.residuals(params)
        return 0.5 * float(r @ r)

    def jacobian(self, params: np.ndarray) -> np.ndarray:
        n = len(params)
        cols = []
        for i in range(n):
            h = 1e-6 * max(1.0, abs(params[i]))
            up, dn = params.copy(), params.copy()
            up[i] += h
            dn[i] -= h
            cols.append((self.residuals(up) - self.residuals(dn)) / (2 * h))
        return np.stack(cols, axis=1)


def levenberg_marquardt(problem: _LinkProblem, p0: np.ndarray, max_iter: int = 50, rel_tol: float = 1e-6,
                        lam0: float = 1e-3):
    p = p0.astype(np.float64).copy()
    r = problem.residuals(p)
    cost = 0.5 * float(r @ r)
    costs = [cost]
    lam = lam0
    converged = cost == 0.0
    it = 0
    while not converged and it < max_iter:
        it += 1
        J = problem.jacobian(p)
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        improved = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = p + step
            r_new = problem.residuals(cand)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / cost
                p, r, cost = cand, r_new, cost_new
                costs.append(cost)
                lam *= 0.1
                improved = True
                if rel < rel_tol or cost == 0.0:
                    converged = True
                break
            lam *= 10.0
        if not improved:
            converged = True  # no descent direction left at any damping
    return p, converged, it, costs


def refine_batch(placements: Sequence[PlacedImage], links: Sequence, cfg: PipelineConfig | None = None,
                 max_iter: int = 50) -> tuple[list[PlacedImage], RefineInfo]:
    """Jointly refine per-image similarities against all link matches.

    ``links[k]`` is the accepted verdict joining ``placements[k]`` (earlier)
    and ``placements[k + 1]``; its matches give points in both images.  The
    first placement is held fixed.  Minimizes half the summed squared forward
    and backward transfer errors with a damped Gauss-Newton schedule and
    never returns a worse solution than the chained initialization.
    """
    if len(placements) < 2:
        raise ValueError("refinement needs at least two placements")
    if len(links) != len(placements) - 1:
        raise ValueError("need one link per adjacent placement pair")
    pairs = []
    for v in links:
        m = v.matches
        if len(m) < 4:
            raise ValueError("every link needs at least 4 surviving matches")
        pairs.append((np.asarray(m.points_a, float), np.asarray(m.points_b, float)))

    init_sims = []
    for p in placements:
        if p.global_transform.kind is TransformKind.HOMOGRAPHY:
            corners = image_corners(p.width, p.height)
            init_sims.append(fit_partial_affine(corners, p.global_transform.apply(corners)).m)
        else:
            init_sims.append(p.global_transform.m)

    problem = _LinkProblem(init_sims[0], pairs)
    p0 = np.concatenate([_sim_params(m) for m in init_sims[1:]])
    p, converged, iters, costs = levenberg_marquardt(problem, p0, max_iter=max_iter)
    if not converged:
        log.warning("batch refinement stopped after %d iterations without converging", iters)

    out = [placements[0]]
    for k, place in enumerate(placements[1:], start=1):
        sim = _sim_matrix(p[4 * (k - 1):4 * k])
        if place.global_transform.kind is TransformKind.HOMOGRAPHY:
            corr = sim @ np.linalg.inv(init_sims[k])
            g = Transform2D(corr @ place.global_transform.m, TransformKind.HOMOGRAPHY)
        else:
            g = Transform2D(sim, TransformKind.PARTIAL_AFFINE)
        out.append(replace(place, global_transform=g))
    return out, RefineInfo(converged, iters, costs[0], costs[-1], costs)


# ---------------------------------------------------------------------------
# Leveling and compositing
# ---------------------------------------------------------------------------


def level_batch(placements: Sequence[PlacedImage], axis: Axis = Axis.HORIZONTAL) -> list[PlacedImage]:
    """Rotate the batch about the first image center so the center line follows the axis."""
    if len(placements) < 2:
        raise ValueError("leveling needs at least two placements")
    centers = np.array([p.center for p in placements])
    mean = centers.mean(axis=0)
    cov = (centers - mean).T @ (centers - mean)
    if np.trace(cov) <= 1e-18:
        raise ValueError("all image centers coincide")
    w, v = np.linalg.eigh(cov)
    d = v[:, np.argmax(w)]
    e = np.array([1.0, 0.0]) if Axis(axis) is Axis.HORIZONTAL else np.array([0.0, 1.0])
    if d @ e < 0:
        d = -d
    phi = math.atan2(e[0] * d[1] - e[1] * d[0], e @ d)
    c0 = centers[0]
    rot = (Transform2D.translation(c0[0], c0[1])
           @ Transform2D.similarity(1.0, -phi, 0.0, 0.0)
           @ Transform2D.translation(-c0[0], -c0[1]))
    return normalize_offsets([p.moved(rot) for p in placements])


def canvas_frame(footprints: Sequence[np.ndarray]) -> tuple[tuple[float, float], int, int]:
    pts = np.concatenate(footprints)
    lo = np.floor(pts.min(axis=0) + 1e-9)
    hi = np.ceil(pts.max(axis=0) - 1e-9)
    w, h = int(hi[0] - lo[0]), int(hi[1] - lo[1])
    return (-float(lo[0]), -float(lo[1])), max(w, 1), max(h, 1)


def warp_into_canvas(pixels: np.ndarray, to_canvas: np.ndarray, canvas_w: int, canvas_h: int):
    """Warp an image given its image->canvas matrix; returns ``(patch, mask, y0, x0)``."""
    h, w = pixels.shape[:2]
    fp = transformed_corners(to_canvas, w, h)
    x0 = max(int(np.floor(fp[:, 0].min())), 0)
    y0 = max(int(np.floor(fp[:, 1].min())), 0)
    x1 = min(int(np.ceil(fp[:, 0].max())), canvas_w)
    y1 = min(int(np.ceil(fp[:, 1].max())), canvas_h)
    patch, valid = warp_to_grid(pixels, np.linalg.inv(to_canvas), x0, y0, x1 - x0, y1 - y0)
    return patch, valid, y0, x0


def composite_batch(images: Sequence[ImageRecord], placements: Sequence[PlacedImage],
                    cfg: PipelineConfig) -> MosaicCanvas:
    """Warp every image into a shared canvas and merge them in chain order."""
    footprints = [p.footprint for p in placements]
    (ox, oy), cw, ch = canvas_frame(footprints)
    pixels = np.zeros((ch, cw, 3), dtype=np.uint8)
    mask = np.zeros((ch, cw), dtype=np.uint8)
    shift = Transform2D.translation(ox, oy)
    axis, sign = cfg.motion.stitch_axis, cfg.motion.stitch_sign
    for k, (img, place) in enumerate(zip(images, placements)):
        to_canvas = (shift @ place.global_transform).m
        patch, valid, y0, x0 = warp_into_canvas(img.pixels, to_canvas, cw, ch)
        if k == 0:
            h, w = valid.shape
            pixels[y0:y0 + h, x0:x0 + w][valid] = np.clip(np.rint(patch[valid]), 0, 255).astype(np.uint8)
            mask[y0:y0 + h, x0:x0 + w] |= valid.astype(np.uint8)
            continue
        if not merge_into(pixels, mask, patch, valid, y0, x0, cfg.blend_levels, axis, sign):
            raise CompositeError(f"{img.id} does not overlap the batch mosaic")
    return MosaicCanvas(pixels, mask, (ox, oy), footprints)


def stitch_batch(images: Sequence[ImageRecord], batch: Batch, cfg: PipelineConfig):
    """Chain, refine, level and composite one batch.

    Returns ``(canvas, placements, refine_info)``; placements are in the
    canvas' mosaic frame.
    """
    placements = chain_global_transforms(batch, images)
    info = None
    if len(placements) >= 2 and all(len(v.matches) >= 4 for v in batch.links):
        placements, info = refine_batch(placements, batch.links, cfg)
    if len(placements) >= 2:
        placements = level_batch(placements, cfg.motion.stitch_axis)
    canvas = composite_batch(images, placements, cfg)
    return canvas, placements, info
