"""Classical keypoint detection, binary descriptors and Hamming matching.

Detection runs a segment test on a radius-3 Bresenham circle, ranks the
surviving pixels by a Harris response and keeps the strongest ones per grid
cell.  Each keypoint gets an intensity-centroid orientation and a 256-bit
descriptor built from a fixed set of smoothed-intensity comparisons rotated by
that orientation.  Coordinates use the pixel-edge convention of
:mod:`rowstitch.core` (pixel centers at ``i + 0.5``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageRecord
from .imaging import luma

PATCH_RADIUS = 15
N_BITS = 256
_PATTERN_SEED = 0x6A09E667

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
_CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]
)


class FeatureError(ValueError):
    pass


class MatchFileError(ValueError):
    pass


def _make_pattern() -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(_PATTERN_SEED))
    pairs = []
    while len(pairs) < N_BITS:
        p = rng.normal(0.0, PATCH_RADIUS * 2 / 5, size=4)
        a, b = p[:2], p[2:]
        if np.hypot(*a) <= PATCH_RADIUS and np.hypot(*b) <= PATCH_RADIUS and np.hypot(*(a - b)) >= 1.0:
            pairs.append(p)
    return np.array(pairs)  # (256, 4): ax, ay, bx, by


_PATTERN = _make_pattern()

_yy, _xx = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_DISC = _xx ** 2 + _yy ** 2 <= PATCH_RADIUS ** 2
_DISC_X = _xx[_DISC]
_DISC_Y = _yy[_DISC]


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints of one image.

    ``keypoints`` is ``(n, 4)``: x, y, response, angle (radians).
    ``descriptors`` is ``(n, 32)`` uint8, i.e. 256 packed bits per keypoint.
    """

    image_id: str
    keypoints: np.ndarray
    descriptors: np.ndarray

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def points(self) -> np.ndarray:
        return self.keypoints[:, :2]

    def subset(self, mask: np.ndarray) -> FeatureSet:
        return FeatureSet(self.image_id, self.keypoints[mask], self.descriptors[mask])


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One-to-one correspondences between two images.

    ``index_a``/``index_b`` refer to keypoint rows (or record order for
    external matches); ``points_a``/``points_b`` are the resolved coordinates.
    """

    index_a: np.ndarray
    index_b: np.ndarray
    scores: np.ndarray
    points_a: np.ndarray
    points_b: np.ndarray

    @classmethod
    def empty(cls) -> MatchSet:
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))

    @classmethod
    def from_points(cls, points_a, points_b, scores=None) -> MatchSet:
        pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
        pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
        n = len(pa)
        s = np.ones(n) if scores is None else np.asarray(scores, dtype=np.float64)
        return cls(np.arange(n), np.arange(n), s, pa, pb)

    def __len__(self) -> int:
        return len(self.index_a)

    def subset(self, mask) -> MatchSet:
        return MatchSet(self.index_a[mask], self.index_b[mask], self.scores[mask],
                        self.points_a[mask], self.points_b[mask])

    def swapped(self) -> MatchSet:
        return MatchSet(self.index_b, self.index_a, self.scores, self.points_b, self.points_a)

    def pair_set(self) -> set[tuple[int, int]]:
        return set(zip(self.index_a.tolist(), self.index_b.tolist()))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def _segment_test(img: np.ndarray, threshold: float, margin: int) -> np.ndarray:
    """Boolean map of pixels passing the segment test.

    A pixel passes when 9 contiguous circle pixels are all brighter or all
    darker than the center by ``threshold``, or when the circle alternates
    between at least two bright and two dark runs of length >= 2 (saddle
    points such as checkerboard junctions).
    """
    h, w = img.shape
    core = img[margin:h - margin, margin:w - margin]
    ring = np.stack([img[margin + dy:h - margin + dy, margin + dx:w - margin + dx] for dx, dy in _CIRCLE])
    bright = ring > core + threshold
    dark = ring < core - threshold

    def arc(flags: np.ndarray, length: int) -> np.ndarray:
        ext = np.concatenate([flags, flags[:length - 1]]).astype(np.int8)
        cs = np.concatenate([np.zeros((1,) + ext.shape[1:], np.int16), np.cumsum(ext, axis=0, dtype=np.int16)])
        win = cs[length:length + 16] - cs[:16]
        return (win == length).any(axis=0)

    def runs(flags: np.ndarray) -> np.ndarray:
        prev = np.roll(flags, 1, axis=0)
        nxt = np.roll(flags, -1, axis=0)
        return (flags & nxt & ~prev).sum(axis=0)

    passed = arc(bright, 9) | arc(dark, 9)
    passed |= (runs(bright) >= 2) & (runs(dark) >= 2)
    out = np.zeros((h, w), dtype=bool)
    out[margin:h - margin, margin:w - margin] = passed
    return out


def _harris(img: np.ndarray, k: float = 0.04, sigma: float = 1.5) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _orientations(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    vals = img[rows[:, None] + _DISC_Y[None], cols[:, None] + _DISC_X[None]]
    m10 = (vals * _DISC_X[None]).sum(axis=1)
    m01 = (vals * _DISC_Y[None]).sum(axis=1)
    return np.arctan2(m01, m10)


def _descriptors(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    ax, ay, bx, by = (_PATTERN[:, i][None] for i in range(4))
    pax = np.rint(c * ax - s * ay).astype(np.intp) + cols[:, None]
    pay = np.rint(s * ax + c * ay).astype(np.intp) + rows[:, None]
    pbx = np.rint(c * bx - s * by).astype(np.intp) + cols[:, None]
    pby = np.rint(s * bx + c * by).astype(np.intp) + rows[:, None]
    bits = img[pay, pax] < img[pby, pbx]
    return np.packbits(bits, axis=1)


def detect_features(
    image: ImageRecord | np.ndarray,
    max_per_cell: int = 40,
    grid: int = 8,
    threshold: float = 20.0,
    region: tuple[int, int, int, int] | None = None,
    image_id: str | None = None,
) -> FeatureSet:
    """Detect oriented keypoints with binary descriptors.

    Args:
        image: an :class:`ImageRecord` or an ``(h, w, 3)`` RGB array.
        max_per_cell: strongest keypoints kept per grid cell.
        grid: the image (or ``region``) is split into ``grid x grid`` cells.
        threshold: segment-test intensity difference.
        region: optional ``(x0, y0, x1, y1)`` pixel window; keypoints are only
            reported inside it, cells tile the window.
        image_id: id stored in the result when ``image`` is a bare array.
    """
    if isinstance(image, ImageRecord):
        pixels, image_id = image.pixels, image.id
    else:
        pixels = np.asarray(image)
        image_id = image_id or ""
    h, w = pixels.shape[:2]
    if PATCH_RADIUS > min(w, h) / 2:
        raise FeatureError(f"image {w}x{h} too small for a {2 * PATCH_RADIUS + 1} px descriptor patch")

    gray = luma(pixels)
    smooth = ndimage.uniform_filter(gray, size=3, mode="nearest")
    margin = PATCH_RADIUS + 1
    x0, y0, x1, y1 = region if region is not None else (0, 0, w, h)
    x0, y0 = max(int(x0), 0), max(int(y0), 0)
    x1, y1 = min(int(x1), w), min(int(y1), h)

    # Work on the window padded by the margin so border handling matches.
    px0, py0 = max(x0 - margin, 0), max(y0 - margin, 0)
    px1, py1 = min(x1 + margin, w), min(y1 + margin, h)
    sub = smooth[py0:py1, px0:px1]
    if min(sub.shape) <= 2 * margin:
        return FeatureSet(image_id, np.zeros((0, 4)), np.zeros((0, N_BITS // 8), np.uint8))
    cand = _segment_test(sub, threshold, 3)
    resp = _harris(sub)
    peak = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
    cand &= peak & (resp > 0)

    r, c = np.nonzero(cand)
    r, c = r + py0, c + px0
    keep = (r >= max(margin, y0)) & (r < min(h - margin, y1)) & (c >= max(margin, x0)) & (c < min(w - margin, x1))
    r, c = r[keep], c[keep]
    score = resp[r - py0, c - px0]

    cell_w = (x1 - x0) / grid
    cell_h = (y1 - y0) / grid
    cell = (np.minimum(((r - y0) / cell_h).astype(int), grid - 1) * grid
            + np.minimum(((c - x0) / cell_w).astype(int), grid - 1))
    order = np.lexsort((c, r, -score, cell))
    cell_sorted = cell[order]
    first = np.searchsorted(cell_sorted, cell_sorted, side="left")
    rank = np.arange(len(order)) - first
    chosen = np.sort(order[rank < max_per_cell])
    r, c, score = r[chosen], c[chosen], score[chosen]

    angles = _orientations(smooth, r, c)
    desc_img = ndimage.gaussian_filter(gray, 2.0, mode="nearest")
    desc = _descriptors(desc_img, r, c, angles)
    kps = np.column_stack([c + 0.5, r + 0.5, score, angles]).astype(np.float64)
    if len(kps) == 0:
        kps = np.zeros((0, 4))
        desc = np.zeros((0, N_BITS // 8), np.uint8)
    return FeatureSet(image_id, kps, desc)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


def hamming_matrix(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between packed 256-bit descriptors."""
    ba = np.unpackbits(da, axis=1).astype(np.float32)
    bb = np.unpackbits(db, axis=1).astype(np.float32)
    na = ba.sum(axis=1)
    nb = bb.sum(axis=1)
    d = na[:, None] + nb[None, :] - 2.0 * (ba @ bb.T)
    return np.rint(d).astype(np.int32)


def hamming(d1: np.ndarray, d2: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(d1, d2)].sum())


def _second_best(d: np.ndarray, axis: int) -> np.ndarray:
    if d.shape[axis] < 2:
        return np.full(d.shape[1 - axis], np.iinfo(np.int32).max)
    return np.partition(d, 1, axis=axis).take(1, axis=axis)


def match_features(a: FeatureSet, b: FeatureSet, max_hamming: int = 64, ratio: float = 0.85) -> MatchSet:
    """Mutual nearest neighbours under Hamming distance.

    A pair survives when it is the nearest neighbour in both directions, its
    distance is at most ``max_hamming``, and in both directions the nearest
    distance is at most ``ratio`` times the second nearest.
    """
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    d = hamming_matrix(a.descriptors, b.descriptors)
    ab = d.argmin(axis=1)
    ba = d.argmin(axis=0)
    ia = np.arange(len(a))
    mutual = ba[ab] == ia
    best = d[ia, ab]
    ok = mutual & (best <= max_hamming)
    second_row = _second_best(d, 1)
    second_col = _second_best(d, 0)[ab]
    ok &= best <= ratio * second_row
    ok &= best <= ratio * second_col
    ia, ib = ia[ok], ab[ok]
    return MatchSet(ia, ib, 1.0 - d[ia, ib] / N_BITS, a.points[ia], b.points[ib])


# ---------------------------------------------------------------------------
# External match files
# ---------------------------------------------------------------------------


def match_file_name(a_id: str, b_id: str) -> str:
    return f"{a_id}__{b_id}.matches"


def load_external_matches(path: str | Path, a_id: str, b_id: str) -> MatchSet:
    """Read a precomputed match file.

    Format: a header ``a=<id> b=<id> wa=<w> ha=<h> wb=<w> hb=<h>`` followed by
    one ``xa ya xb yb score`` record per line.
    """
    path = Path(path)
    if not path.is_file():
        raise MatchFileError(f"{path}: match file not found")
    lines = path.read_text().splitlines()
    if not lines:
        raise MatchFileError(f"{path}: empty match file")
    try:
        header = dict(tok.split("=", 1) for tok in lines[0].split())
        wa, ha, wb, hb = (float(header[k]) for k in ("wa", "ha", "wb", "hb"))
        fa, fb = header["a"], header["b"]
    except (ValueError, KeyError):
        raise MatchFileError(f"{path}:1: malformed header {lines[0]!r}") from None
    if fa != a_id or fb != b_id:
        raise MatchFileError(f"{path}:1: header names pair ({fa}, {fb}), expected ({a_id}, {b_id})")

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError
            xa, ya, xb, yb, score = (float(p) for p in parts)
        except ValueError:
            raise MatchFileError(f"{path}:{lineno}: malformed record {line!r}") from None
        if not (0 <= xa <= wa and 0 <= ya <= ha and 0 <= xb <= wb and 0 <= yb <= hb):
            raise MatchFileError(f"{path}:{lineno}: coordinates outside image bounds")
        if not 0.0 <= score <= 1.0:
            raise MatchFileError(f"{path}:{lineno}: score {score} outside [0, 1]")
        rows.append((xa, ya, xb, yb, score, lineno))

    seen_a: dict[tuple[float, float], int] = {}
    seen_b: dict[tuple[float, float], int] = {}
    for xa, ya, xb, yb, _, lineno in rows:
        for seen, key, side in ((seen_a, (xa, ya), "a"), (seen_b, (xb, yb), "b")):
            if key in seen:
                raise MatchFileError(
                    f"{path}:{lineno}: point {side}={key} already matched on line {seen[key]}")
            seen[key] = lineno
    if not rows:
        return MatchSet.empty()
    arr = np.array([r[:5] for r in rows], dtype=np.float64)
    return MatchSet.from_points(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


def write_match_file(path: str | Path, a_id: str, b_id: str, dims_a, dims_b, matches: MatchSet) -> None:
    lines = [f"a={a_id} b={b_id} wa={dims_a[0]} ha={dims_a[1]} wb={dims_b[0]} hb={dims_b[1]}"]
    for pa, pb, s in zip(matches.points_a, matches.points_b, matches.scores):
        lines.append(f"{pa[0]:.6f} {pa[1]:.6f} {pb[0]:.6f} {pb[1]:.6f} {s:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
