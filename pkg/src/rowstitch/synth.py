"""Deterministic synthetic row scenes rendered along a jittered camera path.

A frame pose maps frame pixel coordinates into the scene::

    S_k(p) = s_k * R(theta_k) @ (p - c) + (x_k, y_c + lateral_k)

with ``c`` the frame center.  The ground-truth link for frame ``k`` maps its
pixels into frame ``k - 1``: ``S_{k-1}^-1 @ S_k``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import GeoRecord, ImageRecord, Transform2D
from .imaging import bilinear_sample, to_uint8, write_image

BASE_LATITUDE = 38.0
DEG_PER_PX = 1e-7
BASE_LONGITUDE = -121.75
SOIL_RGB = (118, 92, 66)
_SCENE_MARGIN = 40


class SynthError(ValueError):
    pass


class Texture(str, enum.Enum):
    BLOB_FIELD = "blob_field"
    CHECKER = "checker"
    NOISE_OCTAVES = "noise_octaves"


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    row_length_px: int = 4096
    row_height_px: int = 600
    texture: Texture = Texture.BLOB_FIELD
    blob_density: float = 60.0
    checker_period: int = 32

    def __post_init__(self):
        object.__setattr__(self, "texture", Texture(self.texture))
        if self.row_length_px < 1 or self.row_height_px < 1:
            raise SynthError("scene dimensions must be positive")
        if self.blob_density < 0:
            raise SynthError("blob_density must be >= 0")
        if self.checker_period < 1:
            raise SynthError("checker_period must be >= 1")


@dataclass(frozen=True)
class Jitter:
    lateral_sigma_px: float = 0.0
    step_sigma_px: float = 0.0
    roll_sigma_deg: float = 0.0
    scale_sigma: float = 0.0

    def __post_init__(self):
        if min(self.lateral_sigma_px, self.step_sigma_px, self.roll_sigma_deg, self.scale_sigma) < 0:
            raise SynthError("jitter sigmas must be >= 0")


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int = 200
    step_px: float = 160.0
    frame_w: int = 640
    frame_h: int = 480
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 1

    def __post_init__(self):
        if self.n_frames < 1:
            raise SynthError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.frame_w < 64 or self.frame_h < 64:
            raise SynthError("frames must be at least 64 px on each side")
        if not 0 < self.step_px < self.frame_w:
            raise SynthError(f"step_px must lie in (0, frame_w), got {self.step_px}")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta_deg: float
    scale: float

    def matrix(self, frame_w: int, frame_h: int) -> np.ndarray:
        """Frame pixel -> scene coordinates."""
        t = math.radians(self.theta_deg)
        c, s = math.cos(t) * self.scale, math.sin(t) * self.scale
        cx, cy = frame_w / 2.0, frame_h / 2.0
        return np.array([[c, -s, self.x - c * cx + s * cy],
                         [s, c, self.y - s * cx - c * cy],
                         [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class SyntheticSequence:
    images: list[ImageRecord]
    links: list[Transform2D]
    geo: list[GeoRecord]
    poses: list[Pose]
    frame_to_scene: list[np.ndarray]

    def center_track(self, k: int) -> np.ndarray:
        """Scene position of frame ``k``'s center, shifted so frame 0's center sits at its own pixel center."""
        p = self.poses[k]
        p0 = self.poses[0]
        w, h = self.images[0].width, self.images[0].height
        return np.array([p.x - p0.x + w / 2.0, p.y - p0.y + h / 2.0])

    def frame0_coords(self, k: int, points) -> np.ndarray:
        """Points of frame ``k`` expressed in frame 0 pixel coordinates."""
        m = np.linalg.solve(self.frame_to_scene[0], self.frame_to_scene[k])
        return Transform2D(m).apply(np.asarray(points, dtype=np.float64))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def _blob_field(spec: SceneSpec) -> np.ndarray:
    h, w = spec.row_height_px, spec.row_length_px
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = SOIL_RGB
    n = int(round(spec.blob_density * h * w / 1e4))
    if n == 0:
        return img.astype(np.uint8)
    rng = _rng(spec.seed)
    cx = rng.uniform(0, w, n)
    cy = rng.uniform(0, h, n)
    ra = rng.uniform(4.0, 16.0, n)
    rb = ra * rng.uniform(0.35, 0.9, n)
    ang = rng.uniform(0, math.pi, n)
    base = np.column_stack([rng.uniform(20, 110, n), rng.uniform(90, 230, n), rng.uniform(10, 90, n)])
    shade = rng.uniform(-60, 60, n)
    for i in range(n):
        r = int(math.ceil(ra[i])) + 1
        xa, xb = max(int(cx[i]) - r, 0), min(int(cx[i]) + r + 1, w)
        ya, yb = max(int(cy[i]) - r, 0), min(int(cy[i]) + r + 1, h)
        if xa >= xb or ya >= yb:
            continue
        gx, gy = np.meshgrid(np.arange(xa, xb) + 0.5 - cx[i], np.arange(ya, yb) + 0.5 - cy[i])
        ca, sa = math.cos(ang[i]), math.sin(ang[i])
        u = (ca * gx + sa * gy) / ra[i]
        v = (-sa * gx + ca * gy) / rb[i]
        rho = np.sqrt(u * u + v * v)
        # one-pixel soft edge
        alpha = np.clip((1.0 - rho) * rb[i] + 0.5, 0.0, 1.0)[..., None]
        color = base[i] + shade[i] * u[..., None]
        patch = img[ya:yb, xa:xb]
        patch[:] = alpha * color + (1.0 - alpha) * patch
    return to_uint8(img)


def _checker(spec: SceneSpec) -> np.ndarray:
    h, w, p = spec.row_height_px, spec.row_length_px, spec.checker_period
    cells = ((np.arange(h)[:, None] // p) + (np.arange(w)[None, :] // p)) % 2
    light, dark = np.array([220, 220, 220], np.uint8), np.array([35, 35, 35], np.uint8)
    return np.where(cells[..., None] == 1, light, dark).astype(np.uint8)


def _noise_octaves(spec: SceneSpec) -> np.ndarray:
    h, w = spec.row_height_px, spec.row_length_px
    rng = _rng(spec.seed)
    acc = np.zeros((h, w, 3), dtype=np.float64)
    amp, total = 1.0, 0.0
    for cell in (64, 32, 16, 8):
        gh, gw = h // cell + 2, w // cell + 2
        coarse = rng.standard_normal((gh, gw, 3))
        ys = (np.arange(h) + 0.5) / cell
        xs = (np.arange(w) + 0.5) / cell
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        for ch in range(3):
            acc[..., ch] += amp * ndimage.map_coordinates(coarse[..., ch], [gy, gx], order=3, mode="nearest")
        total += amp
        amp *= 0.6
    acc /= total
    return to_uint8(128.0 + 45.0 * acc)


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """Texture buffer ``(row_height_px, row_length_px, 3)`` uint8."""
    if spec.texture is Texture.BLOB_FIELD:
        return _blob_field(spec)
    if spec.texture is Texture.CHECKER:
        return _checker(spec)
    return _noise_octaves(spec)


def draw_poses(traj: TrajectorySpec, scene_height: float | None = None) -> list[Pose]:
    """Poses drawn sequentially from the trajectory seed."""
    j = traj.jitter
    rng = _rng(traj.seed)
    y_c = (scene_height if scene_height is not None else traj.frame_h + 2 * _SCENE_MARGIN) / 2.0
    x = traj.frame_w / 2.0 + _SCENE_MARGIN
    poses = []
    for k in range(traj.n_frames):
        if k > 0:
            x += traj.step_px + j.step_sigma_px * rng.standard_normal()
        lateral = j.lateral_sigma_px * rng.standard_normal()
        roll = j.roll_sigma_deg * rng.standard_normal()
        scale = 1.0 + j.scale_sigma * rng.standard_normal()
        poses.append(Pose(x, y_c + lateral, roll, scale))
    return poses


def scene_for(traj: TrajectorySpec, seed: int = 0, texture: Texture = Texture.BLOB_FIELD,
              blob_density: float = 60.0) -> SceneSpec:
    """A scene just large enough for the trajectory, with margin on every side."""
    poses = draw_poses(traj)
    corners = np.array([[0, 0, 1], [traj.frame_w, 0, 1], [traj.frame_w, traj.frame_h, 1], [0, traj.frame_h, 1]], float)
    xs = np.concatenate([(p.matrix(traj.frame_w, traj.frame_h) @ corners.T)[0] for p in poses])
    length = int(math.ceil(max(xs.max() + _SCENE_MARGIN, 4 * traj.frame_w)))
    return SceneSpec(seed=seed, row_length_px=length, row_height_px=traj.frame_h + 2 * _SCENE_MARGIN,
                     texture=texture, blob_density=blob_density)


def geo_for_forward(forward_px: float) -> GeoRecord:
    return GeoRecord(BASE_LATITUDE + forward_px * DEG_PER_PX, BASE_LONGITUDE)


def render_sequence(scene: np.ndarray, traj: TrajectorySpec, id_prefix: str = "frame") -> SyntheticSequence:
    """Sample every frame from ``scene`` along the drawn trajectory."""
    sh, sw = scene.shape[:2]
    poses = draw_poses(traj, sh)
    fw, fh = traj.frame_w, traj.frame_h
    corners = np.array([[0, 0, 1], [fw, 0, 1], [fw, fh, 1], [0, fh, 1]], float)
    gx, gy = np.meshgrid(np.arange(fw) + 0.5, np.arange(fh) + 0.5)
    mats, images, geo = [], [], []
    width = len(str(max(traj.n_frames - 1, 0)))
    for k, pose in enumerate(poses):
        m = pose.matrix(fw, fh)
        cs = (m @ corners.T)[:2]
        if cs[0].min() < 0 or cs[1].min() < 0 or cs[0].max() > sw or cs[1].max() > sh:
            raise SynthError(f"frame {k} leaves the scene bounds ({sw}x{sh})")
        sx = m[0, 0] * gx + m[0, 1] * gy + m[0, 2]
        sy = m[1, 0] * gx + m[1, 1] * gy + m[1, 2]
        vals, _ = bilinear_sample(scene, sx, sy)
        g = geo_for_forward(pose.x)
        images.append(ImageRecord(f"{id_prefix}_{k:0{max(width, 4)}d}", k, to_uint8(vals), g))
        geo.append(g)
        mats.append(m)
    links = [Transform2D.identity()]
    for k in range(1, len(mats)):
        links.append(Transform2D.from_matrix(np.linalg.solve(mats[k - 1], mats[k])))
    return SyntheticSequence(images, links, geo, poses, mats)


def synthesize(traj: TrajectorySpec, seed: int = 0, texture: Texture = Texture.BLOB_FIELD,
               blob_density: float = 60.0) -> SyntheticSequence:
    """Generate a fitting scene and render the trajectory through it."""
    spec = scene_for(traj, seed, texture, blob_density)
    return render_sequence(generate_scene(spec), traj)


def format_matrix(m: np.ndarray) -> str:
    return " ".join(f"{v:.9g}" for v in np.asarray(m, dtype=np.float64).ravel())


def write_dataset(seq: SyntheticSequence, out_dir: str | Path, fmt: str = "png") -> Path:
    """Images plus ``geo.txt`` and ``ground_truth.txt`` sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for img in seq.images:
        write_image(out / f"{img.id}.{fmt}", img.pixels)
    with open(out / "geo.txt", "w") as fh:
        for img, g in zip(seq.images, seq.geo):
            fh.write(f"{img.id} {g.latitude:.10f} {g.longitude:.10f}\n")
    with open(out / "ground_truth.txt", "w") as fh:
        for img, link in zip(seq.images, seq.links):
            fh.write(f"{img.id} {format_matrix(link.m)}\n")
    with open(out / "gt_points.txt", "w") as fh:
        for k, (img, g) in enumerate(zip(seq.images, seq.geo)):
            x, y = seq.center_track(k)
            fh.write(f"{img.id} {x:.6f} {y:.6f} {g.latitude:.10f} {g.longitude:.10f}\n")
    with open(out / "poses.txt", "w") as fh:
        for img, m in zip(seq.images, seq.frame_to_scene):
            fh.write(f"{img.id} {format_matrix(m)}\n")
    return out

