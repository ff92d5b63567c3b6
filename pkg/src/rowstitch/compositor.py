"""Seam selection and multiband blending inside an overlap region.

Both operations work in a canonical orientation where the stitch direction
runs along columns and the earlier image lies on the left; inputs stitched
vertically or against the axis are transposed/flipped on the way in and out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Axis
from .imaging import luma, to_uint8

GRADIENT_WEIGHT = 0.5
OUTSIDE_COST = 1e6
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

OUTSIDE, LABEL_A, LABEL_B = 0, 1, 2


class CompositeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SeamLabeling:
    """Labels over the overlap bounding box.

    ``labels`` holds ``LABEL_A``/``LABEL_B`` inside the overlap and
    ``OUTSIDE`` elsewhere; ``side_a`` is the per-pixel seam side for the whole
    box (True on the earlier image's side).  ``bbox`` is ``(y0, x0, y1, x1)``
    in the coordinates of the arrays passed to :func:`find_seam`; ``path``
    lists seam pixels as ``(row, col)`` relative to the box.
    """

    labels: np.ndarray
    side_a: np.ndarray
    path: list[tuple[int, int]]
    bbox: tuple[int, int, int, int]
    cost: float


def _canon(arr: np.ndarray, axis: Axis, sign: int) -> np.ndarray:
    if Axis(axis) is Axis.VERTICAL:
        arr = np.swapaxes(arr, 0, 1)
    if sign < 0:
        arr = arr[:, ::-1]
    return arr


def _uncanon(arr: np.ndarray, axis: Axis, sign: int) -> np.ndarray:
    if sign < 0:
        arr = arr[:, ::-1]
    if Axis(axis) is Axis.VERTICAL:
        arr = np.swapaxes(arr, 0, 1)
    return np.ascontiguousarray(arr)


def seam_dp(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost top-to-bottom path with column steps in {-1, 0, +1}.

    Returns the column of the path in every row and the summed cost.  Ties
    prefer the straight step, then the left one.
    """
    cost = np.asarray(cost, dtype=np.float64)
    h, w = cost.shape
    acc = np.empty_like(cost)
    back = np.zeros((h, w), dtype=np.int8)
    acc[0] = cost[0]
    inf = np.full(1, np.inf)
    for r in range(1, h):
        prev = acc[r - 1]
        left = np.concatenate([inf, prev[:-1]])
        right = np.concatenate([prev[1:], inf])
        choices = np.stack([prev, left, right])  # step 0, -1, +1 (source col offset)
        k = np.argmin(choices, axis=0)
        acc[r] = cost[r] + choices[k, np.arange(w)]
        back[r] = np.array([0, -1, 1], dtype=np.int8)[k]
    cols = np.empty(h, dtype=np.intp)
    cols[-1] = int(np.argmin(acc[-1]))
    for r in range(h - 1, 0, -1):
        cols[r - 1] = cols[r] + back[r, cols[r]]
    return cols, float(acc[-1, cols[-1]])


def seam_cost_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel color difference plus weighted intensity gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    color = np.abs(a - b).sum(axis=-1) if a.ndim == 3 else np.abs(a - b)

    def grad(img):
        g = luma(img) if img.ndim == 3 else img.astype(np.float64)
        gx = np.zeros_like(g)
        gy = np.zeros_like(g)
        gx[:, :-1] = np.abs(np.diff(g, axis=1))
        gy[:-1, :] = np.abs(np.diff(g, axis=0))
        return gx + gy

    return color + GRADIENT_WEIGHT * (grad(a) + grad(b))


def find_seam(warped_a: np.ndarray, warped_b: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray,
              axis: Axis = Axis.HORIZONTAL, sign: int = 1) -> SeamLabeling:
    """Seam through the overlap of two aligned images, ``a`` being the earlier one."""
    ma, mb = np.asarray(mask_a, bool), np.asarray(mask_b, bool)
    overlap = ma & mb
    if not overlap.any():
        raise CompositeError("masks do not overlap")
    rows = np.nonzero(overlap.any(axis=1))[0]
    cols = np.nonzero(overlap.any(axis=0))[0]
    y0, y1, x0, x1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1

    a = _canon(warped_a[y0:y1, x0:x1], axis, sign)
    b = _canon(warped_b[y0:y1, x0:x1], axis, sign)
    ov = _canon(overlap[y0:y1, x0:x1], axis, sign)
    cost = seam_cost_map(a, b)
    cost = np.where(ov, cost, OUTSIDE_COST)
    path_cols, total = seam_dp(cost)

    h, w = ov.shape
    side_a = np.arange(w)[None, :] < path_cols[:, None]
    labels = np.where(ov, np.where(side_a, LABEL_A, LABEL_B), OUTSIDE).astype(np.uint8)

    # map the path back to the caller's orientation
    rr, cc = np.arange(h), path_cols
    if sign < 0:
        cc = w - 1 - cc
    if Axis(axis) is Axis.VERTICAL:
        rr, cc = cc, rr
    path = list(zip(rr.tolist(), cc.tolist()))
    return SeamLabeling(_uncanon(labels, axis, sign), _uncanon(side_a, axis, sign), path,
                        (int(y0), int(x0), int(y1), int(x1)), total)


def path_cost(cost: np.ndarray, cols) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(cost[np.arange(cost.shape[0]), np.asarray(cols)].sum())


# ---------------------------------------------------------------------------
# Pyramids
# ---------------------------------------------------------------------------


def _blur(x: np.ndarray) -> np.ndarray:
    x = ndimage.convolve1d(x, _KERNEL, axis=0, mode="mirror")
    return ndimage.convolve1d(x, _KERNEL, axis=1, mode="mirror")


def pyr_down(x: np.ndarray) -> np.ndarray:
    return _blur(x)[::2, ::2]


def pyr_up(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    z = np.zeros(tuple(shape) + x.shape[2:], dtype=np.float64)
    z[::2, ::2] = x
    return _blur(z) * 4.0


def gaussian_pyramid(x: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [np.asarray(x, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(pyr_down(out[-1]))
    return out


def laplacian_pyramid(x: np.ndarray, levels: int) -> list[np.ndarray]:
    g = gaussian_pyramid(x, levels)
    return [g[k] - pyr_up(g[k + 1], g[k].shape[:2]) for k in range(levels - 1)] + [g[-1]]


def collapse(pyr: list[np.ndarray]) -> np.ndarray:
    out = pyr[-1]
    for lev in reversed(pyr[:-1]):
        out = pyr_up(out, lev.shape[:2]) + lev
    return out


def effective_levels(shape: tuple[int, int], levels: int) -> int:
    """Largest depth <= ``levels`` with ``2**depth`` fitting in both dimensions."""
    fit = int(np.floor(np.log2(max(min(shape[:2]), 1))))
    return max(1, min(levels, fit))


def blend_weights(side_a: np.ndarray, levels: int) -> list[np.ndarray]:
    """Gaussian pyramid of the blurred binary seam-side mask."""
    m = _blur(np.asarray(side_a, dtype=np.float64))
    return gaussian_pyramid(m, levels)


def multiband_blend(warped_a: np.ndarray, warped_b: np.ndarray, labeling: SeamLabeling, levels: int,
                    mask_a: np.ndarray | None = None, mask_b: np.ndarray | None = None) -> np.ndarray:
    """Blend the two images over the labeling's bounding box.

    ``warped_a``/``warped_b`` and the optional masks are full arrays in the
    same coordinates given to :func:`find_seam`.  Invalid pixels of one image
    are filled from the other before building pyramids.  Returns the blended
    box as uint8; the caller decides where to write it.
    """
    y0, x0, y1, x1 = labeling.bbox
    a = np.asarray(warped_a[y0:y1, x0:x1], dtype=np.float64)
    b = np.asarray(warped_b[y0:y1, x0:x1], dtype=np.float64)
    if mask_a is not None and mask_b is not None:
        va = np.asarray(mask_a[y0:y1, x0:x1], bool)
        vb = np.asarray(mask_b[y0:y1, x0:x1], bool)
        sel_a = va if a.ndim == 2 else va[..., None]
        sel_b = vb if b.ndim == 2 else vb[..., None]
        a, b = np.where(sel_a, a, b), np.where(sel_b, b, a)
    levels = effective_levels(a.shape, levels)
    la = laplacian_pyramid(a, levels)
    lb = laplacian_pyramid(b, levels)
    weights = blend_weights(labeling.side_a, levels)
    bands = []
    for pa, pb, wk in zip(la, lb, weights):
        if pa.ndim == 3:
            wk = wk[..., None]
        bands.append(wk * pa + (1.0 - wk) * pb)
    return to_uint8(collapse(bands))


def seam_band(labeling: SeamLabeling, radius: int) -> np.ndarray:
    """Pixels of the box within Chebyshev distance ``radius`` of the A/B boundary."""
    side = labeling.side_a
    edge = np.zeros_like(side, dtype=bool)
    edge[:, 1:] |= side[:, 1:] != side[:, :-1]
    edge[:, :-1] |= side[:, 1:] != side[:, :-1]
    edge[1:, :] |= side[1:, :] != side[:-1, :]
    edge[:-1, :] |= side[1:, :] != side[:-1, :]
    if radius <= 0:
        return edge
    return ndimage.binary_dilation(edge, structure=np.ones((3, 3), bool), iterations=radius)


def merge_into(canvas: np.ndarray, canvas_mask: np.ndarray, patch: np.ndarray, patch_mask: np.ndarray,
               y0: int, x0: int, levels: int, axis: Axis = Axis.HORIZONTAL, sign: int = 1) -> bool:
    """Composite ``patch`` (the later image) onto ``canvas`` at offset ``(y0, x0)`` in place.

    Returns False when the patch does not overlap existing content (it is
    then pasted without blending).
    """
    h, w = patch_mask.shape
    region = canvas[y0:y0 + h, x0:x0 + w]
    rmask = canvas_mask[y0:y0 + h, x0:x0 + w] > 0
    pmask = np.asarray(patch_mask, bool)
    overlap = rmask & pmask
    if not overlap.any():
        region[pmask] = to_uint8(patch[pmask])
        canvas_mask[y0:y0 + h, x0:x0 + w] |= pmask.astype(np.uint8)
        return False

    patch_u8 = to_uint8(patch)
    seam = find_seam(region, patch_u8, rmask, pmask, axis, sign)
    blended = multiband_blend(region, patch_u8, seam, levels, rmask, pmask)
    by0, bx0, by1, bx1 = seam.bbox
    write = rmask[by0:by1, bx0:bx1] | pmask[by0:by1, bx0:bx1]
    # outside the overlap box the later image only adds pixels where nothing exists yet
    only_patch = pmask & ~rmask
    only_patch[by0:by1, bx0:bx1] = False
    region[only_patch] = patch_u8[only_patch]
    sub = region[by0:by1, bx0:bx1]
    sub[write] = blended[write]
    canvas_mask[y0:y0 + h, x0:x0 + w] |= pmask.astype(np.uint8)
    return True
