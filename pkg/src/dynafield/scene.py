"""Core scene data types and bundle validation.

A scene is a set of anisotropic 3D Gaussians plus the per-frame data needed
to supervise and evaluate the semantic fields: RGB frames, cameras, tracked
object masks, per-object embeddings and optional ground-truth annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

SEMANTIC_LEVELS = ("subpart", "part", "whole")

STATIC_EMBED_DIM = 512
CAPTION_EMBED_DIM = 4096
STATIC_LATENT_DIM = 3
CAPTION_LATENT_DIM = 6


@dataclass
class GaussianCloud:
    """A batch of N Gaussian primitives stored as torch tensors.

    positions        (N, 3)  scene-space means
    rotations        (N, 4)  unit quaternions (w, x, y, z)
    log_scales       (N, 3)  per-axis extents stored as log-extents
    opacity_logits   (N,)    logistic-activated to opacity in (0, 1)
    colors           (N, 3)  RGB in [0, 1]
    static_semantics {level: (N, 3)} compressed time-agnostic features
    state_prototypes (N, K, 6) compressed per-state features
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    static_semantics: dict[str, torch.Tensor]
    state_prototypes: torch.Tensor

    @property
    def num_gaussians(self) -> int:
        return self.positions.shape[0]

    @property
    def num_states(self) -> int:
        return self.state_prototypes.shape[1]

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def detach_clone(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.detach().clone(),
            rotations=self.rotations.detach().clone(),
            log_scales=self.log_scales.detach().clone(),
            opacity_logits=self.opacity_logits.detach().clone(),
            colors=self.colors.detach().clone(),
            static_semantics={k: v.detach().clone() for k, v in self.static_semantics.items()},
            state_prototypes=self.state_prototypes.detach().clone(),
        )

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.to(dtype),
            rotations=self.rotations.to(dtype),
            log_scales=self.log_scales.to(dtype),
            opacity_logits=self.opacity_logits.to(dtype),
            colors=self.colors.to(dtype),
            static_semantics={k: v.to(dtype) for k, v in self.static_semantics.items()},
            state_prototypes=self.state_prototypes.to(dtype),
        )


@dataclass
class CameraModel:
    """Pinhole camera with a normalized timestamp t in [0, 1]."""

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4 rigid transform, row-major
    width: int
    height: int
    t: float


@dataclass
class MaskTrack:
    """Binary masks for one tracked object across frames."""

    object_id: int
    masks: dict[int, np.ndarray]  # frame index -> bool (H, W)
    frame_count: int


@dataclass
class CaptionRecord:
    """One frame-level caption for one object, with its sentence embedding."""

    object_id: int
    frame_index: int
    video_description: str
    caption: str
    embedding: np.ndarray  # (4096,) unit-normalized


@dataclass
class GroundTruthQuery:
    """Annotation for one evaluation query on a bundle."""

    text: str
    mode: str  # "timeAgnostic" | "timeSensitive"
    object_id: int
    state: int
    active_frames: set[int]


@dataclass
class GroundTruth:
    queries: list[GroundTruthQuery] = field(default_factory=list)
    # object_id -> state index per frame (for diagnostics)
    state_timeline: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class SceneBundle:
    """On-disk dataset: frames, cameras, mask tracks and supervision data."""

    frames: list[np.ndarray]  # T images, uint8 (H, W, 3)
    cameras: list[CameraModel]
    mask_tracks: list[MaskTrack]
    # (level, object_id, frame) -> unit 512-vector
    static_embeddings: dict[tuple[str, int, int], np.ndarray]
    caption_records: list[CaptionRecord]
    ground_truth: GroundTruth | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.frames[0].shape[:2]
        return w, h

    def track_for(self, object_id: int) -> MaskTrack:
        for track in self.mask_tracks:
            if track.object_id == object_id:
                return track
        raise KeyError(f"no mask track for object {object_id}")

    def caption_record(self, object_id: int, frame_index: int) -> CaptionRecord | None:
        for rec in self.caption_records:
            if rec.object_id == object_id and rec.frame_index == frame_index:
                return rec
        return None


def _finite(arr) -> bool:
    if isinstance(arr, torch.Tensor):
        return bool(torch.isfinite(arr).all())
    return bool(np.isfinite(arr).all())


def validate_cloud(cloud: GaussianCloud, tol: float = 1e-6) -> list[str]:
    """Check Gaussian invariants; returns human-readable violations."""
    violations = []
    for name, tensor in [
        ("positions", cloud.positions),
        ("rotations", cloud.rotations),
        ("log_scales", cloud.log_scales),
        ("opacity_logits", cloud.opacity_logits),
        ("colors", cloud.colors),
        ("state_prototypes", cloud.state_prototypes),
    ]:
        if not _finite(tensor):
            violations.append(f"gaussian field '{name}' contains non-finite values")
    norms = torch.linalg.norm(cloud.rotations, dim=-1)
    bad = torch.nonzero(torch.abs(norms - 1.0) > tol).flatten()
    for i in bad.tolist():
        violations.append(f"gaussian {i}: quaternion norm {norms[i].item():.8f} not 1")
    if cloud.state_prototypes.ndim != 3 or cloud.state_prototypes.shape[1] < 1:
        violations.append("state_prototypes must have shape (N, K>=1, 6)")
    for level in SEMANTIC_LEVELS:
        if level not in cloud.static_semantics:
            violations.append(f"missing static semantics for level '{level}'")
        elif not _finite(cloud.static_semantics[level]):
            violations.append(f"static semantics '{level}' contains non-finite values")
    return violations


def validate_bundle(bundle: SceneBundle, cloud: GaussianCloud | None = None) -> list[str]:
    """Validate a bundle against the type invariants.

    Violations are data, not faults: the return value is an empty list iff
    the bundle is well formed, and each entry names the offending record.
    """
    violations: list[str] = []
    t_count = bundle.num_frames
    if len(bundle.cameras) != t_count:
        violations.append(
            f"frame/camera count mismatch: {t_count} frames, {len(bundle.cameras)} cameras"
        )
    if t_count == 0:
        violations.append("bundle has no frames")
        return violations
    height, width = bundle.frames[0].shape[:2]
    for idx, frame in enumerate(bundle.frames):
        if frame.shape[:2] != (height, width):
            violations.append(f"frame {idx}: resolution {frame.shape[:2]} != ({height}, {width})")
    for idx, cam in enumerate(bundle.cameras):
        if cam.fx <= 0 or cam.fy <= 0:
            violations.append(f"camera {idx}: non-positive focal length")
        if not 0.0 <= cam.t <= 1.0:
            violations.append(f"camera {idx}: time {cam.t} out of [0,1]")
        rot = np.asarray(cam.world_to_camera, dtype=np.float64)[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            violations.append(f"camera {idx}: rotation part not orthonormal")
        if (cam.width, cam.height) != (width, height):
            violations.append(f"camera {idx}: size {(cam.width, cam.height)} != frame size")

    seen_ids: set[int] = set()
    for track in bundle.mask_tracks:
        if track.object_id in seen_ids:
            violations.append(f"duplicate object id {track.object_id}")
        seen_ids.add(track.object_id)
        for frame_index, mask in track.masks.items():
            if frame_index >= t_count:
                violations.append(
                    f"object {track.object_id}: mask frame {frame_index} >= T={t_count}"
                )
            if mask.shape != (height, width):
                violations.append(
                    f"object {track.object_id}, frame {frame_index}: "
                    f"mask resolution {mask.shape} != ({height}, {width})"
                )

    for key, vec in bundle.static_embeddings.items():
        level, object_id, frame_index = key
        if level not in SEMANTIC_LEVELS:
            violations.append(f"static embedding {key}: unknown level '{level}'")
        if vec.shape != (STATIC_EMBED_DIM,):
            violations.append(f"static embedding {key}: dim {vec.shape} != ({STATIC_EMBED_DIM},)")
        if frame_index >= t_count:
            violations.append(f"static embedding {key}: frame out of range")

    for rec in bundle.caption_records:
        where = f"caption (object {rec.object_id}, frame {rec.frame_index})"
        if rec.embedding.shape != (CAPTION_EMBED_DIM,):
            violations.append(f"{where}: embedding dim {rec.embedding.shape}")
        else:
            norm = float(np.linalg.norm(rec.embedding))
            if abs(norm - 1.0) > 1e-5:
                violations.append(f"{where}: embedding norm {norm:.6f} not 1")
        if rec.frame_index >= t_count:
            violations.append(f"{where}: frame out of range")

    if cloud is not None:
        violations.extend(validate_cloud(cloud))
    return violations
