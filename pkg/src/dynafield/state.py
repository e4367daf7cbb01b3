"""Shared trained-state container and training configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compressor import AutoencoderPair
from .deformation import DecoderHeads, FieldDeformation, HexPlaneGrid
from .scene import GaussianCloud

DEFAULT_STAGE_ITERATIONS = (3000, 1000, 10000, 10000)
LR_DEFORM = 1.6e-4
LR_PROTOTYPES = 2.5e-3


@dataclass
class TrainConfig:
    stage_iterations: tuple[int, int, int, int] = DEFAULT_STAGE_ITERATIONS
    iteration_scale: float = 1.0
    lr_deform: float = LR_DEFORM
    lr_prototypes: float = LR_PROTOTYPES
    lr_semantics: float = 2.5e-3
    grid_lr_multiplier: float = 10.0
    # per-tensor scene learning rates for the RGB stages
    scene_lrs: dict = field(
        default_factory=lambda: {
            "positions": 2e-4,
            "rotations": 1e-3,
            "log_scales": 5e-3,
            "opacity_logits": 5e-2,
            "colors": 2.5e-3,
        }
    )
    num_states: int = 3
    seed: int = 0
    # pixels sampled per training iteration; 0 renders the full frame
    pixels_per_iteration: int = 4096
    grid_resolutions: tuple[int, ...] = (16, 32)
    grid_feature_width: int = 16
    grid_init_scale: float = 0.15
    head_hidden: int = 64

    def scaled_iterations(self, stage: int) -> int:
        raw = self.stage_iterations[stage - 1]
        return max(1, int(round(raw * self.iteration_scale)))

    def validate(self) -> None:
        if any(n <= 0 for n in self.stage_iterations):
            raise ValueError("stage iteration counts must be positive")
        for name in ("lr_deform", "lr_prototypes", "lr_semantics", "iteration_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_states < 1:
            raise ValueError("K must be >= 1")


@dataclass
class EngineState:
    """Everything a trained field needs to render and answer queries."""

    cloud: GaussianCloud
    grid: HexPlaneGrid
    heads: DecoderHeads
    static_ae: AutoencoderPair | None
    caption_ae: AutoencoderPair | None
    config: TrainConfig
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    @property
    def deformation(self) -> FieldDeformation:
        return FieldDeformation(self.grid, self.heads)
