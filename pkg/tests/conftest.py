"""Shared builders for synthetic images, match sets and small sequences."""

from __future__ import annotations

import numpy as np
import pytest

from rowstitch.core import ImageRecord
from rowstitch.synth import Jitter, Texture, TrajectorySpec, synthesize


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def noise_image(h: int, w: int, seed: int = 0, smooth: float = 0.0) -> np.ndarray:
    """Random RGB uint8 image, optionally Gaussian-smoothed per channel."""
    from scipy import ndimage

    img = rng(seed).uniform(0, 255, size=(h, w, 3))
    if smooth > 0:
        img = np.stack([ndimage.gaussian_filter(img[..., c], smooth) for c in range(3)], axis=-1)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def record(pixels: np.ndarray, idx: int = 0, name: str | None = None, geo=None) -> ImageRecord:
    return ImageRecord(name or f"img{idx:03d}", idx, pixels, geo)


@pytest.fixture(scope="session")
def small_sequence():
    """Twelve jittered frames over a blob field (stitchable in one batch)."""
    traj = TrajectorySpec(n_frames=13, step_px=160.0, jitter=Jitter(3.0, 10.0, 0.5, 0.005), seed=11)
    return synthesize(traj, seed=5)


@pytest.fixture(scope="session")
def smooth_sequence():
    """Short zero-jitter sequence over smooth noise, for resampling checks."""
    traj = TrajectorySpec(n_frames=4, step_px=100.0, frame_w=256, frame_h=192, seed=3,
                          jitter=Jitter(2.0, 5.0, 1.0, 0.01))
    return synthesize(traj, seed=9, texture=Texture.NOISE_OCTAVES)
