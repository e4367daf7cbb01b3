"""Open-vocabulary querying over a trained field.

Time-agnostic queries threshold a relevance map computed from the decoded
static feature renders; time-sensitive queries additionally score the
decoded time-varying features against the query inside the initial masks
and keep the frames whose mean cosine exceeds the video-mean threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import renderer
from .fixtures import CANONICAL_PHRASES
from .scene import SEMANTIC_LEVELS, CameraModel
from .state import EngineState

log = logging.getLogger(__name__)

RELEVANCE_THRESHOLD = 0.4
HOLE_FILL_LIMIT_PX = 16
ALPHA_COVERAGE = 0.5

MODE_TIME_AGNOSTIC = "timeAgnostic"
MODE_TIME_SENSITIVE = "timeSensitive"


@dataclass
class QueryRequest:
    text: str
    mode: str
    static_embedding: np.ndarray  # (512,) unit
    dynamic_embedding: np.ndarray  # (4096,) unit
    frames: list[int]


@dataclass
class QueryResult:
    masks: dict[int, np.ndarray]  # frame -> bool (H, W)
    scores: dict[int, float | None]  # None where the initial mask is empty
    selected_frames: list[int]
    threshold: float | None
    level: str
    mode: str
    relevance: dict[int, np.ndarray] = field(default_factory=dict)


def relevance_map(
    pixel_features: np.ndarray,
    query: np.ndarray,
    canonical_embeddings: list[np.ndarray],
) -> np.ndarray:
    """Softmax-ratio relevance against the canonical phrases, per pixel.

    All vectors are unit-normalized; returns min over canonicals of
    exp(f.q) / (exp(f.q) + exp(f.c)), which lies in [0, 1].
    """
    feats = np.asarray(pixel_features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    dots_q = feats @ q
    out = None
    for canon in canonical_embeddings:
        c = np.asarray(canon, dtype=np.float64)
        c = c / np.linalg.norm(c)
        dots_c = feats @ c
        ratio = np.exp(dots_q) / (np.exp(dots_q) + np.exp(dots_c))
        out = ratio if out is None else np.minimum(out, ratio)
    return out


def postprocess_relevance(rel: np.ndarray, tau: float = RELEVANCE_THRESHOLD) -> np.ndarray:
    """Relevance map -> binary mask.

    Rescales relative to the 0.5 chance level, thresholds at tau, keeps the
    largest connected component, and fills enclosed holes smaller than 16 px.
    A map that never exceeds chance yields an empty mask.
    """
    rel = np.asarray(rel)
    peak = float(rel.max()) if rel.size else 0.0
    if peak <= 0.5 + 1e-9:
        return np.zeros(rel.shape, dtype=bool)
    scaled = np.clip((rel - 0.5) / (peak - 0.5), 0.0, 1.0)
    mask = scaled > tau
    if not mask.any():
        return mask
    labels, count = ndimage.label(mask)
    if count > 1:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
        mask = labels == (int(np.argmax(sizes)) + 1)
    # fill enclosed holes below the size limit
    inv_labels, inv_count = ndimage.label(~mask)
    border = np.zeros(mask.shape, dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    border_labels = set(np.unique(inv_labels[border & ~mask]))
    for lbl in range(1, inv_count + 1):
        if lbl in border_labels:
            continue
        hole = inv_labels == lbl
        if hole.sum() < HOLE_FILL_LIMIT_PX:
            mask = mask | hole
    return mask


def shared_pca_basis(samples: np.ndarray, components: int = 3):
    """Deterministic PCA basis (mean, (D, components)) with sign fixing."""
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((svals > 1e-10).sum())
    basis = np.zeros((samples.shape[1], components), dtype=np.float64)
    usable = min(rank, components)
    if usable < components:
        log.warning("rank-deficient feature field: padding PCA basis with zeros")
    for i in range(usable):
        vec = vt[i]
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        basis[:, i] = vec
    return mean, basis


class QueryEngine:
    """Read-only query interface over a trained engine state."""

    def __init__(
        self,
        state: EngineState,
        cameras: list[CameraModel],
        static_text_embedder,
        caption_text_embedder,
    ):
        self.state = state
        self.cameras = cameras
        self.static_text_embedder = static_text_embedder
        self.caption_text_embedder = caption_text_embedder
        self._canonicals = [
            static_text_embedder.embed(phrase) for phrase in CANONICAL_PHRASES
        ]
        self._static_render_cache: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def num_frames(self) -> int:
        return len(self.cameras)

    def build_request(self, text: str, mode: str, frames: list[int] | None = None) -> QueryRequest:
        if mode not in (MODE_TIME_AGNOSTIC, MODE_TIME_SENSITIVE):
            raise ValueError(f"unknown query mode '{mode}'")
        return QueryRequest(
            text=text,
            mode=mode,
            static_embedding=self.static_text_embedder.embed(text),
            dynamic_embedding=self.caption_text_embedder.embed(text),
            frames=list(frames) if frames is not None else list(range(self.num_frames)),
        )

    # ------------------------------------------------------------- rendering

    def _render_static_decoded(self, frame: int, level: str):
        """Decoded (H*W, 512) static features and the (H, W) alpha plane."""
        key = (frame, level)
        if key not in self._static_render_cache:
            camera = self.cameras[frame]
            with torch.no_grad():
                image = renderer.render(
                    self.state.cloud, self.state.deformation, camera, f"static:{level}"
                )
                latent = image.values.reshape(-1, image.channels)
                decoded = self.state.static_ae.decode(latent).numpy()
            self._static_render_cache[key] = (decoded, image.alpha.numpy())
        return self._static_render_cache[key]

    def render_time_varying_latent(self, frame: int) -> renderer.FeatureImage:
        camera = self.cameras[frame]
        with torch.no_grad():
            return renderer.render(
                self.state.cloud, self.state.deformation, camera, "timeVarying"
            )

    def relevance_for(self, frame: int, level: str, query_static: np.ndarray) -> np.ndarray:
        camera = self.cameras[frame]
        decoded, _ = self._render_static_decoded(frame, level)
        rel = relevance_map(decoded, query_static, self._canonicals)
        return rel.reshape(camera.height, camera.width)

    def _choose_level(self, request: QueryRequest) -> str:
        best_level, best_peak = SEMANTIC_LEVELS[0], -np.inf
        for level in SEMANTIC_LEVELS:
            peak = max(
                float(self.relevance_for(f, level, request.static_embedding).max())
                for f in request.frames
            )
            if peak > best_peak:
                best_level, best_peak = level, peak
        return best_level

    # --------------------------------------------------------------- queries

    def time_agnostic_query(self, request: QueryRequest) -> QueryResult:
        level = self._choose_level(request)
        masks, relevance = {}, {}
        for f in request.frames:
            rel = self.relevance_for(f, level, request.static_embedding)
            relevance[f] = rel
            masks[f] = postprocess_relevance(rel)
        return QueryResult(
            masks=masks,
            scores={f: None for f in request.frames},
            selected_frames=[],
            threshold=None,
            level=level,
            mode=MODE_TIME_AGNOSTIC,
            relevance=relevance,
        )

    def _frame_score(self, frame: int, mask: np.ndarray, query_dynamic: np.ndarray) -> float:
        image = self.render_time_varying_latent(frame)
        latent = image.values.reshape(-1, image.channels)
        flat_mask = torch.as_tensor(mask.reshape(-1))
        with torch.no_grad():
            decoded = self.state.caption_ae.decode(latent[flat_mask]).numpy()
        decoded = decoded / np.maximum(np.linalg.norm(decoded, axis=-1, keepdims=True), 1e-12)
        q = query_dynamic / np.linalg.norm(query_dynamic)
        return float((decoded @ q).mean())

    def time_sensitive_query(self, request: QueryRequest) -> QueryResult:
        initial = self.time_agnostic_query(request)
        scores: dict[int, float | None] = {}
        for f in request.frames:
            mask = initial.masks[f]
            scores[f] = (
                self._frame_score(f, mask, request.dynamic_embedding) if mask.any() else None
            )
        valid = [s for s in scores.values() if s is not None]
        if not valid:
            raise ValueError("query target not found: all initial masks are empty")
        threshold = float(np.mean(valid))
        selected = [
            f for f in request.frames if scores[f] is not None and scores[f] > threshold
        ]
        masks = {
            f: initial.masks[f] if f in selected else np.zeros_like(initial.masks[f])
            for f in request.frames
        }
        # masks on selected frames are exactly the time-agnostic masks
        for f in selected:
            masks[f] = initial.masks[f]
        return QueryResult(
            masks=masks,
            scores=scores,
            selected_frames=selected,
            threshold=threshold,
            level=initial.level,
            mode=MODE_TIME_SENSITIVE,
            relevance=initial.relevance,
        )

    def query(self, request: QueryRequest) -> QueryResult:
        if request.mode == MODE_TIME_AGNOSTIC:
            return self.time_agnostic_query(request)
        return self.time_sensitive_query(request)

    # ----------------------------------------------------------------- export

    def export_pca_visualization(self, frames: list[int] | None = None) -> list[np.ndarray]:
        """Shared-basis PCA RGB visualization of the time-varying features."""
        frames = list(frames) if frames is not None else list(range(self.num_frames))
        if len(frames) < 2:
            raise ValueError("PCA export needs at least 2 frames")
        latents, covers = [], []
        for f in frames:
            image = self.render_time_varying_latent(f)
            latents.append(image.values.numpy())
            covers.append(image.alpha.numpy() > ALPHA_COVERAGE)
        samples = np.concatenate(
            [lat[cov] for lat, cov in zip(latents, covers) if cov.any()]
        )
        if samples.shape[0] == 0:
            return [np.zeros(lat.shape[:2] + (3,), dtype=np.uint8) for lat in latents]
        mean, basis = shared_pca_basis(samples.astype(np.float64), components=3)
        outputs = []
        for lat in latents:
            proj = (lat.astype(np.float64) - mean) @ basis
            lo = proj.min(axis=(0, 1), keepdims=True)
            hi = proj.max(axis=(0, 1), keepdims=True)
            span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
            scaled = (proj - lo) / span * 255.0
            outputs.append(np.clip(np.rint(scaled), 0, 255).astype(np.uint8))
        return outputs
