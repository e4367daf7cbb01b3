"""Deterministic stand-ins for the external captioning/embedding services.

Real deployments talk to a multimodal captioning model and a sentence
embedding model over HTTP. Tests and the synthetic scenes use the clients
here instead: embeddings are reproducible hash-seeded unit vectors with
controllable cluster structure, and captions come from a content-hash
lookup table prepared by the test harness.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .scene import CAPTION_EMBED_DIM, STATIC_EMBED_DIM

CANONICAL_PHRASES = ("object", "things", "stuff", "texture")


def hash_unit_vector(text: str, dim: int, salt: str = "") -> np.ndarray:
    """Reproducible pseudo-random unit vector derived from the text."""
    digest = hashlib.sha256(f"{salt}|{text}".encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim).astype(np.float32)
    return vec / np.linalg.norm(vec)


class DeterministicEmbedder:
    """Hash-based text embedder with cluster structure.

    Texts containing a configured cluster phrase embed close to that
    phrase's center (cosine ~ cluster_weight^2 between two members); all
    other texts embed to near-orthogonal hash vectors.
    """

    def __init__(
        self,
        dim: int,
        cluster_phrases: list[str] | None = None,
        cluster_weight: float = 0.98,
        salt: str = "embed",
    ):
        self.dim = dim
        self.cluster_phrases = sorted(cluster_phrases or [], key=len, reverse=True)
        self.cluster_weight = cluster_weight
        self.salt = salt

    def center(self, phrase: str) -> np.ndarray:
        return hash_unit_vector(phrase, self.dim, salt=f"{self.salt}-center")

    def _match(self, text: str) -> str | None:
        lowered = text.lower()
        for phrase in self.cluster_phrases:
            if phrase.lower() in lowered:
                return phrase
        return None

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        residual = hash_unit_vector(text, self.dim, salt=f"{self.salt}-residual")
        phrase = self._match(text)
        if phrase is None:
            vec = residual
        else:
            w = self.cluster_weight
            center = self.center(phrase)
            residual = residual - center * float(residual @ center)
            residual /= np.linalg.norm(residual)
            vec = w * center + np.sqrt(1.0 - w * w) * residual
        vec = vec / np.linalg.norm(vec)
        return vec.astype(np.float32)


def make_caption_embedder(cluster_phrases: list[str] | None = None) -> DeterministicEmbedder:
    return DeterministicEmbedder(CAPTION_EMBED_DIM, cluster_phrases, salt="caption")


class StaticTextEmbedder:
    """CLIP-surrogate text embedder (512-dim).

    Configured phrases (object nouns) map exactly to their cluster center so
    a query embedding aligns with the synthesizer's supervision clusters;
    everything else (including the canonical relevance phrases) maps to an
    independent hash vector.
    """

    def __init__(self, object_phrases: list[str] | None = None):
        self.object_phrases = sorted(object_phrases or [], key=len, reverse=True)

    def center(self, phrase: str) -> np.ndarray:
        return hash_unit_vector(phrase, STATIC_EMBED_DIM, salt="static-center")

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        lowered = text.lower()
        for phrase in self.object_phrases:
            if phrase.lower() in lowered:
                return self.center(phrase)
        return hash_unit_vector(text, STATIC_EMBED_DIM, salt="static-free")


def image_content_key(images) -> str:
    """Stable content hash over an ordered list of uint8 arrays."""
    h = hashlib.sha256()
    for img in images:
        arr = np.ascontiguousarray(img)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class DeterministicCaptioner:
    """Captioning client answering from a prepared content-hash lookup.

    ``video_texts`` maps the hash of the full prompt-frame sequence to the
    video-level description; ``frame_texts`` maps single prompt-image hashes
    to frame captions.
    """

    def __init__(self, video_texts: dict[str, str], frame_texts: dict[str, str]):
        self.video_texts = dict(video_texts)
        self.frame_texts = dict(frame_texts)
        self.calls = 0

    def video_description(self, prompt_images, template: str) -> str:
        self.calls += 1
        key = image_content_key(prompt_images)
        if key not in self.video_texts:
            raise KeyError("no fixture video description for these prompt frames")
        return self.video_texts[key]

    def frame_caption(self, video_description: str, prompt_image, template: str, frame) -> str:
        self.calls += 1
        key = image_content_key([prompt_image])
        if key not in self.frame_texts:
            raise KeyError("no fixture caption for this prompt frame")
        return self.frame_texts[key]


class CountingEmbedder:
    """Wraps an embedder and counts calls (for cache-behaviour tests)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        return self.inner.embed(text)
