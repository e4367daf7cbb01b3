"""Caption supervision pipeline.

Builds visual prompts (red contour + grayed, blurred background), obtains
video-level descriptions and per-frame captions from a captioning client,
embeds the captions, and assembles pixel-aligned supervision maps. All
external responses are cached on disk keyed by request content hash, so a
warm re-run performs zero client calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fixtures import image_content_key
from .scene import CaptionRecord, SceneBundle

log = logging.getLogger(__name__)

CONTOUR_RADIUS = 2
BLUR_RADIUS = 10
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
VIDEO_PROMPT_SLOT = "{video prompt}"

DEFAULT_VIDEO_TEMPLATE = (
    "I highlighted the objects I want you to describe in red outline and blurred "
    "the objects that don't need you to describe. First please determine the "
    "object highlighted in red line in the video. Then briefly summarize the "
    "transformation process of this object."
)

DEFAULT_FRAME_TEMPLATE = (
    "You have an understanding of the overall transformation process of the "
    "object: {video prompt}. Now, I have provided you with images extracted from "
    "this process. Please describe the specific state of the object(s) in the "
    "given image, without referring to the entire video process. Avoid "
    "describing states that you can't infer directly from the picture. Avoid "
    "repeating descriptions in context. For example, if the context suggests "
    "the object is moving up and down but the image shows it is just moving "
    "down, explicitly only state that the object is in a moving down state. If "
    "the context suggests the object is breaking but the image shows it is "
    "complete right now, explicitly only state that the object appears to be "
    "complete. If context tells you something changes from green to blue, but "
    "it's blue in this image, just state that the object is blue."
)


@dataclass
class PromptTemplates:
    video_template: str = DEFAULT_VIDEO_TEMPLATE
    frame_template: str = DEFAULT_FRAME_TEMPLATE

    def __post_init__(self):
        if not self.video_template or not self.frame_template:
            raise ValueError("prompt templates must be non-empty")
        if VIDEO_PROMPT_SLOT not in self.frame_template:
            raise ValueError(f"frame template must contain the {VIDEO_PROMPT_SLOT!r} slot")


def _gaussian_kernel(radius: int) -> np.ndarray:
    sigma = radius / 2.0
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(taps**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, radius: int = BLUR_RADIUS) -> np.ndarray:
    """Separable Gaussian blur (sigma = radius / 2, edge-replicated borders)."""
    kernel = _gaussian_kernel(radius)
    out = image.astype(np.float64)
    out = ndimage.correlate1d(out, kernel, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="nearest")
    return out


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """Luma grayscale of an (H, W, 3) uint8 frame, kept as float64."""
    w = np.asarray(GRAY_WEIGHTS, dtype=np.float64)
    return frame.astype(np.float64) @ w


def _disk(radius: int) -> np.ndarray:
    ys, xs = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (xs**2 + ys**2) <= radius**2


def mask_contour(mask: np.ndarray, radius: int = CONTOUR_RADIUS) -> np.ndarray:
    """Pixels within ``radius`` of the mask's boundary (image border counts)."""
    eroded = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0
    )
    boundary = mask & ~eroded
    return ndimage.binary_dilation(boundary, structure=_disk(radius))


def build_visual_prompt(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Red-contoured object on a grayed, blurred background; byte-stable."""
    if mask.shape != frame.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != frame shape {frame.shape[:2]}")
    if not mask.any():
        raise ValueError("empty object mask")
    gray = to_grayscale(frame)
    blurred = gaussian_blur(gray, BLUR_RADIUS)
    blurred_u8 = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)

    out = frame.copy()
    background = ~mask
    out[background] = blurred_u8[background, None]
    contour = mask_contour(mask, CONTOUR_RADIUS)
    out[contour] = (255, 0, 0)
    return out


class CaptionCache:
    """cache/<sha256>.json response store."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def get(self, key: str):
        path = self.directory / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text())
        return None

    def put(self, key: str, value) -> None:
        (self.directory / f"{key}.json").write_text(json.dumps(value))


def _with_retries(fn, attempts: int = 3, base_delay: float = 0.05):
    last = None
    for attempt in range(attempts):
        try:
            return fn()
        except (ConnectionError, TimeoutError, OSError) as exc:
            last = exc
            if attempt < attempts - 1:
                time.sleep(base_delay * 2**attempt)
    raise RuntimeError(f"captioning service unreachable after {attempts} attempts") from last


class CaptionPipeline:
    """End-to-end caption supervision for one bundle.

    ``caption_client`` provides video_description(images, template) and
    frame_caption(description, image, template, frame); ``embed_client``
    provides embed(text) -> unit 4096-vector.
    """

    def __init__(
        self,
        caption_client,
        embed_client,
        cache_dir: str | Path,
        templates: PromptTemplates | None = None,
        frame_stride: int = 1,
    ):
        self.caption_client = caption_client
        self.embed_client = embed_client
        self.cache = CaptionCache(cache_dir)
        self.templates = templates or PromptTemplates()
        if frame_stride < 1:
            raise ValueError("frame stride must be >= 1")
        self.frame_stride = frame_stride

    def request_video_description(self, prompts: list[np.ndarray]) -> str:
        if not prompts:
            raise ValueError("need at least one prompt frame")
        payload = {
            "kind": "video_description",
            "template": self.templates.video_template,
            "frames": image_content_key(prompts),
        }
        key = self.cache.key(payload)
        cached = self.cache.get(key)
        if cached is not None:
            return cached["text"]
        text = _with_retries(
            lambda: self.caption_client.video_description(
                prompts, self.templates.video_template
            )
        )
        if not text:
            raise RuntimeError("captioning service returned an empty video description")
        self.cache.put(key, {"text": text})
        return text

    def request_frame_caption(
        self, video_description: str, prompt: np.ndarray, frame: np.ndarray
    ) -> str:
        template = self.templates.frame_template.replace(VIDEO_PROMPT_SLOT, video_description)
        payload = {
            "kind": "frame_caption",
            "template": template,
            "frame": image_content_key([prompt]),
        }
        key = self.cache.key(payload)
        cached = self.cache.get(key)
        if cached is not None:
            return cached["text"]
        text = _with_retries(
            lambda: self.caption_client.frame_caption(
                video_description, prompt, template, frame
            )
        )
        if not text:
            raise RuntimeError("captioning service returned an empty caption")
        self.cache.put(key, {"text": text})
        return text

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        payload = {"kind": "embedding", "text": text}
        key = self.cache.key(payload)
        cached = self.cache.get(key)
        if cached is not None:
            return np.asarray(cached["vector"], dtype=np.float32)
        vec = np.asarray(_with_retries(lambda: self.embed_client.embed(text)), dtype=np.float32)
        if vec.shape != (4096,):
            raise RuntimeError(f"embedding service returned dim {vec.shape}, expected (4096,)")
        vec = vec / np.linalg.norm(vec)
        self.cache.put(key, {"vector": vec.tolist()})
        return vec

    def run(self, bundle: SceneBundle) -> list[CaptionRecord]:
        """Caption every masked (object, frame) at the configured stride."""
        records: list[CaptionRecord] = []
        for track in bundle.mask_tracks:
            frames_with_mask = sorted(
                f for f, m in track.masks.items() if m.any() and f < bundle.num_frames
            )
            if not frames_with_mask:
                continue
            prompts = {
                f: build_visual_prompt(bundle.frames[f], track.masks[f])
                for f in frames_with_mask
            }
            description = self.request_video_description(
                [prompts[f] for f in frames_with_mask]
            )
            captioned = frames_with_mask[:: self.frame_stride]
            texts = {
                f: self.request_frame_caption(description, prompts[f], bundle.frames[f])
                for f in captioned
            }
            for f in frames_with_mask:
                nearest = min(captioned, key=lambda c: (abs(c - f), c))
                text = texts[nearest]
                records.append(
                    CaptionRecord(
                        object_id=track.object_id,
                        frame_index=f,
                        video_description=description,
                        caption=text,
                        embedding=self.embed_text(text),
                    )
                )
        return records


@dataclass
class SupervisionMap:
    """Pixel-aligned embedding supervision for one frame.

    label_map holds an index into ``embeddings`` per pixel, -1 where
    unsupervised; ``coverage`` marks supervised pixels.
    """

    frame_index: int
    label_map: np.ndarray  # (H, W) int32
    embeddings: np.ndarray  # (M, D)
    object_ids: list[int]  # row -> object id

    @property
    def coverage(self) -> np.ndarray:
        return self.label_map >= 0


def assemble_supervision(
    bundle: SceneBundle, records: list[CaptionRecord]
) -> list[SupervisionMap]:
    """Assign each masked pixel its object's caption embedding, per frame.

    Overlapping masks are resolved smallest-area-first (and logged);
    unsupervised pixels stay marked -1. Faults if any masked (object, frame)
    lacks a caption record.
    """
    by_key = {(r.object_id, r.frame_index): r for r in records}
    missing = []
    for track in bundle.mask_tracks:
        for f, mask in track.masks.items():
            if mask.any() and (track.object_id, f) not in by_key:
                missing.append((track.object_id, f))
    if missing:
        raise ValueError(f"missing caption records for (object, frame) pairs: {sorted(missing)}")

    width, height = bundle.image_size
    maps = []
    for f in range(bundle.num_frames):
        entries = []
        for track in bundle.mask_tracks:
            mask = track.masks.get(f)
            if mask is None or not mask.any():
                continue
            entries.append((int(mask.sum()), track.object_id, mask))
        # Largest first so smaller masks overwrite (smallest-area wins).
        entries.sort(key=lambda e: (-e[0], e[1]))
        label_map = np.full((height, width), -1, dtype=np.int32)
        embeddings, object_ids = [], []
        claimed = np.zeros((height, width), dtype=bool)
        for area, object_id, mask in entries:
            overlap = int((mask & claimed).sum())
            if overlap:
                log.warning(
                    "frame %d: mask of object %d overlaps %d already-claimed pixels; "
                    "smaller mask wins",
                    f,
                    object_id,
                    overlap,
                )
            row = len(embeddings)
            embeddings.append(by_key[(object_id, f)].embedding)
            object_ids.append(object_id)
            label_map[mask] = row
            claimed |= mask
        emb = (
            np.stack(embeddings).astype(np.float32)
            if embeddings
            else np.zeros((0, 4096), dtype=np.float32)
        )
        maps.append(
            SupervisionMap(
                frame_index=f, label_map=label_map, embeddings=emb, object_ids=object_ids
            )
        )
    return maps


def delta_sim_from_cosines(pos: list[float], neg: list[float]) -> float:
    if not pos or not neg:
        raise ValueError("delta_sim needs at least one positive and one negative pair")
    return float(np.mean(pos) - np.mean(neg))


def delta_sim(
    pos_pairs: list[tuple[str, str]],
    neg_pairs: list[tuple[str, str]],
    embedder,
) -> float:
    """Mean positive-pair minus mean negative-pair query/caption cosine."""

    def cosines(pairs):
        vals = []
        for query, caption in pairs:
            a = np.asarray(embedder.embed(query), dtype=np.float64)
            b = np.asarray(embedder.embed(caption), dtype=np.float64)
            vals.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        return vals

    return delta_sim_from_cosines(cosines(pos_pairs), cosines(neg_pairs))
