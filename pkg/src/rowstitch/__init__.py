"""Crop-row image stitching: pairwise gating, batch mosaics, straightening and row assembly."""

from .core import (
    Axis,
    ConfigError,
    GeoRecord,
    ImageRecord,
    MotionConstraints,
    PairVerdict,
    PipelineConfig,
    RejectReason,
    Transform2D,
    TransformKind,
    WarpMode,
    load_config,
    validate_config,
)
from .pipeline import PipelineResult, run_pipeline

__all__ = [
    "Axis",
    "ConfigError",
    "GeoRecord",
    "ImageRecord",
    "MotionConstraints",
    "PairVerdict",
    "PipelineConfig",
    "PipelineResult",
    "RejectReason",
    "Transform2D",
    "TransformKind",
    "WarpMode",
    "load_config",
    "run_pipeline",
    "validate_config",
]
