"""Desk-scale 4D language fields over dynamic Gaussian scenes."""

from .scene import (
    CAPTION_EMBED_DIM,
    SEMANTIC_LEVELS,
    STATIC_EMBED_DIM,
    CameraModel,
    CaptionRecord,
    GaussianCloud,
    GroundTruth,
    GroundTruthQuery,
    MaskTrack,
    SceneBundle,
    validate_bundle,
    validate_cloud,
)
from .state import EngineState, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CAPTION_EMBED_DIM",
    "SEMANTIC_LEVELS",
    "STATIC_EMBED_DIM",
    "CameraModel",
    "CaptionRecord",
    "EngineState",
    "GaussianCloud",
    "GroundTruth",
    "GroundTruthQuery",
    "MaskTrack",
    "SceneBundle",
    "TrainConfig",
    "validate_bundle",
    "validate_cloud",
    "__version__",
]
