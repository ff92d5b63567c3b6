"""Pixel-level helpers: intensity conversion, bilinear sampling, image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import apply_matrix

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def luma(pixels: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB buffer as float32."""
    px = np.asarray(pixels, dtype=np.float32)
    return px[..., 0] * 0.299 + px[..., 1] * 0.587 + px[..., 2] * 0.114


def bilinear_sample(src: np.ndarray, xs: np.ndarray, ys: np.ndarray, src_mask: np.ndarray | None = None):
    """Sample ``src`` at continuous coordinates.

    ``xs``/``ys`` follow the pixel-edge convention (pixel centers at
    ``i + 0.5``).  Returns ``(values, valid)``: float32 values of shape
    ``xs.shape + src.shape[2:]`` and a boolean validity array.  A sample is
    valid when it lies within the hull of pixel centers and, if ``src_mask`` is
    given, all four contributing pixels with nonzero weight are valid.
    """
    h, w = src.shape[:2]
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    eps = 1e-6
    valid = (fx >= -eps) & (fx <= w - 1 + eps) & (fy >= -eps) & (fy <= h - 1 + eps)
    fx = np.clip(fx, 0.0, w - 1)
    fy = np.clip(fy, 0.0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0).astype(np.float32)
    ay = (fy - y0).astype(np.float32)

    if src_mask is not None:
        m = np.asarray(src_mask, dtype=bool)
        tol = 1e-6
        ok = (m[y0, x0] | ((ax > 1 - tol) | (ay > 1 - tol)))
        ok &= (m[y0, x1] | ((ax < tol) | (ay > 1 - tol)))
        ok &= (m[y1, x0] | ((ax > 1 - tol) | (ay < tol)))
        ok &= (m[y1, x1] | ((ax < tol) | (ay < tol)))
        valid &= ok

    if src.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    s = src.astype(np.float32, copy=False)
    top = s[y0, x0] * (1 - ax) + s[y0, x1] * ax
    bot = s[y1, x0] * (1 - ax) + s[y1, x1] * ax
    out = top * (1 - ay) + bot * ay
    if src.ndim == 3:
        out = out * valid[..., None]
    else:
        out = out * valid
    return out, valid


def warp_to_grid(
    src: np.ndarray,
    dst_to_src: np.ndarray,
    x0: float,
    y0: float,
    width: int,
    height: int,
    src_mask: np.ndarray | None = None,
):
    """Destination-driven warp.

    Fills a ``height x width`` grid whose pixel ``(r, c)`` has center
    ``(x0 + c + 0.5, y0 + r + 0.5)`` in the destination frame by mapping each
    center through the 3x3 matrix ``dst_to_src`` and sampling bilinearly.
    """
    cols = x0 + np.arange(width) + 0.5
    rows = y0 + np.arange(height) + 0.5
    gx, gy = np.meshgrid(cols, rows)
    m = np.asarray(dst_to_src, dtype=np.float64)
    den = m[2, 0] * gx + m[2, 1] * gy + m[2, 2]
    sx = (m[0, 0] * gx + m[0, 1] * gy + m[0, 2]) / den
    sy = (m[1, 0] * gx + m[1, 1] * gy + m[1, 2]) / den
    return bilinear_sample(src, sx, sy, src_mask)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def image_corners(width: float, height: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])


def transformed_corners(m: np.ndarray, width: float, height: float) -> np.ndarray:
    return apply_matrix(m, image_corners(width, height))


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image format: {path.name} (expected PNG or JPEG)")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels)).save(Path(path), optimize=False)


def list_images(folder: str | Path) -> list[Path]:
    """Image files in a folder, lexicographically ordered."""
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
