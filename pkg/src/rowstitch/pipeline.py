"""End-to-end row stitching with per-image coordinate tracking."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .batch_stitcher import MosaicCanvas, PlacedImage, stitch_batch
from .core import ImageRecord, PairVerdict, PipelineConfig, Transform2D, apply_matrix, validate_config
from .features import FeatureSet, MatchSet, detect_features, load_external_matches, match_features
from .georef import ControlPoint, RegressionReport, georeference_report, register_image_centers
from .match_gate import accept_pair, verdict_log_line
from .row_assembler import RowAssembly, assemble_row_detailed
from .sequencer import Batch, StitchChain, build_batches, build_chain
from .straightener import StraightenMap, straighten

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def resolve_threads(threads: int | None) -> int:
    """``None`` or ``0`` selects one worker per CPU."""
    if not threads:
        return max(os.cpu_count() or 1, 1)
    if threads < 0:
        raise ValueError("threads must be >= 0")
    return threads


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


@dataclass(eq=False)
class ImageMap:
    """Composed map from an image's pixels into the final mosaic."""

    image_id: str
    width: int
    height: int
    batch_index: int
    to_batch: np.ndarray
    batch_straighten: StraightenMap
    row: RowAssembly

    def map_points(self, points) -> np.ndarray:
        p = apply_matrix(self.to_batch, np.asarray(points, dtype=np.float64).reshape(-1, 2))
        p = self.batch_straighten.map_points(p)
        return self.row.map_points(self.batch_index, p)

    def local_matrix(self, point=None) -> np.ndarray:
        """3x3 composition of every stage, linearized at ``point`` (default: image center)."""
        p = np.array([[self.width / 2.0, self.height / 2.0]]) if point is None else np.asarray(point, float).reshape(1, 2)
        in_batch = apply_matrix(self.to_batch, p)
        m = self.batch_straighten.local_matrix(in_batch[0]) @ self.to_batch
        mid = self.batch_straighten.map_points(in_batch)
        m = self.row.local_matrix(self.batch_index, mid) @ m
        return m / m[2, 2]


@dataclass(eq=False)
class PipelineResult:
    mosaic: MosaicCanvas
    chain: StitchChain
    batches: list[Batch]
    image_maps: dict[int, ImageMap]
    used_ids: list[str]
    skipped_ids: list[str]
    verdict_lines: list[str]
    batch_canvases: list[MosaicCanvas]
    batch_placements: list[list[PlacedImage]]
    control_points: list[ControlPoint] = field(default_factory=list)
    georef: RegressionReport | None = None
    geo_skipped: int = 0

    def transform_lines(self) -> list[str]:
        lines = []
        for idx in self.chain.used_indices:
            mp = self.image_maps[idx]
            vals = " ".join(f"{v:.9g}" for v in mp.local_matrix().ravel())
            lines.append(f"{mp.image_id} {vals}")
        return lines

    def gap_lines(self) -> list[str]:
        return [g.line() for g in self.chain.gaps]


def make_matcher(images: Sequence[ImageRecord], cfg: PipelineConfig, threads: int = 1,
                 matches_dir: str | Path | None = None) -> Callable[[int, int], PairVerdict]:
    """Pair gate over detected features, or over precomputed match files."""
    if matches_dir is not None:
        root = Path(matches_dir)

        def raw(i: int, j: int) -> MatchSet:
            a, b = images[i], images[j]
            path = root / f"{a.id}__{b.id}.matches"
            if not path.exists():
                return MatchSet.empty()
            return load_external_matches(path, a.id, b.id)
    else:
        def detect(img: ImageRecord) -> FeatureSet:
            return detect_features(img.pixels, cfg.feature_max_per_cell, cfg.feature_grid, image_id=img.id)

        feats = _pmap(detect, list(images), threads)

        def raw(i: int, j: int) -> MatchSet:
            return match_features(feats[i], feats[j], cfg.max_hamming, cfg.match_ratio)

    def gate(i: int, j: int) -> PairVerdict:
        return accept_pair(images[i], images[j], raw(i, j), cfg)

    return gate


def run_pipeline(images: Sequence[ImageRecord], cfg: PipelineConfig | None = None, strict: bool = False,
                 threads: int | None = 1, matches_dir: str | Path | None = None) -> PipelineResult:
    """Select, stitch, straighten and assemble an ordered image sequence."""
    cfg = validate_config(cfg)
    workers = resolve_threads(threads)
    images = list(images)
    if len(images) < 2:
        raise PipelineError(f"need at least two images, got {len(images)}")

    gate = make_matcher(images, cfg, workers, matches_dir)
    chain = build_chain(images, cfg, gate, strict=strict)
    verdicts = [verdict_log_line(images[i].id, images[j].id, v) for i, j, v in chain.attempts]
    if len(chain.used_indices) < 2:
        raise PipelineError(f"no image could be linked to the first image ({chain.gaps[0].line()})")
    batches = build_batches(chain, cfg.batch_size)

    def do_batch(b: Batch):
        canvas, placements, _ = stitch_batch([images[i] for i in b.indices], b, cfg)
        straight, plan = straighten(canvas, cfg.straighten_tolerance_px, cfg.smooth_window)
        return canvas, placements, straight, plan

    done = _pmap(do_batch, batches, workers)
    row = assemble_row_detailed([d[2] for d in done], cfg, workers)

    maps: dict[int, ImageMap] = {}
    for bi, (b, (canvas, placements, _, plan)) in enumerate(zip(batches, done)):
        shift = Transform2D.translation(*canvas.origin_offset)
        for idx, place in zip(b.indices, placements):
            if idx in maps:
                continue
            img = images[idx]
            maps[idx] = ImageMap(img.id, img.width, img.height, bi, (shift @ place.global_transform).m, plan, row)

    used = set(chain.used_indices)
    result = PipelineResult(
        mosaic=row.canvas,
        chain=chain,
        batches=batches,
        image_maps=maps,
        used_ids=[images[i].id for i in chain.used_indices],
        skipped_ids=[img.id for k, img in enumerate(images) if k not in used],
        verdict_lines=verdicts,
        batch_canvases=[d[0] for d in done],
        batch_placements=[d[1] for d in done],
    )
    used_imgs = [images[i] for i in chain.used_indices]
    points, skipped = register_image_centers([maps[i] for i in chain.used_indices], used_imgs)
    result.control_points, result.geo_skipped = points, skipped
    if len(points) >= 2:
        try:
            result.georef = georeference_report(points, skipped, cfg.motion.stitch_axis.index)
        except ValueError as exc:
            log.warning("georeference report skipped: %s", exc)
    return result
