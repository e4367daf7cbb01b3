"""HTTP clients for the captioning/embedding services and the fixture server.

Wire contract: POST {template, video_description?, frames: [base64 png]} to
the caption endpoint returns {text}; POST {text} to the embedding endpoint
returns {vector: [4096 floats]}. The built-in fixture server implements
both deterministically for tests and offline runs.
"""

from __future__ import annotations

import base64
import hashlib
import io

import httpx
import numpy as np
from PIL import Image
from pydantic import BaseModel

from .fixtures import DeterministicEmbedder
from .scene import CAPTION_EMBED_DIM


def encode_image(array: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(array)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def decode_image(data: str) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB"))


class HttpCaptionClient:
    def __init__(self, endpoint: str, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=30.0)

    def _post(self, payload: dict) -> str:
        try:
            resp = self.client.post(self.endpoint, json=payload)
        except httpx.TransportError as exc:
            raise ConnectionError(str(exc)) from exc
        resp.raise_for_status()
        return resp.json()["text"]

    def video_description(self, prompt_images, template: str) -> str:
        return self._post(
            {"template": template, "frames": [encode_image(im) for im in prompt_images]}
        )

    def frame_caption(self, video_description: str, prompt_image, template: str, frame) -> str:
        return self._post(
            {
                "template": template,
                "video_description": video_description,
                "frames": [encode_image(prompt_image)],
            }
        )


class HttpEmbedClient:
    def __init__(self, endpoint: str, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=30.0)

    def embed(self, text: str) -> np.ndarray:
        try:
            resp = self.client.post(self.endpoint, json={"text": text})
        except httpx.TransportError as exc:
            raise ConnectionError(str(exc)) from exc
        resp.raise_for_status()
        return np.asarray(resp.json()["vector"], dtype=np.float32)


class _CaptionBody(BaseModel):
    template: str
    video_description: str | None = None
    frames: list[str]


class _EmbedBody(BaseModel):
    text: str


def make_fixture_app(captioner=None, embedder: DeterministicEmbedder | None = None):
    """ASGI app serving deterministic captions and embeddings.

    With no captioner, caption texts are derived from the content hash of
    the attached frames, so identical requests always get identical text.
    """
    from fastapi import FastAPI

    embedder = embedder or DeterministicEmbedder(CAPTION_EMBED_DIM, salt="fixture")
    app = FastAPI(title="dynafield fixture services")

    @app.post("/caption")
    def caption(body: _CaptionBody):
        images = [decode_image(f) for f in body.frames]
        if captioner is not None:
            if body.video_description is None:
                return {"text": captioner.video_description(images, body.template)}
            return {
                "text": captioner.frame_caption(
                    body.video_description, images[0], body.template, None
                )
            }
        digest = hashlib.sha256()
        for im in images:
            digest.update(im.tobytes())
        tag = digest.hexdigest()[:8]
        if body.video_description is None:
            return {"text": f"object {tag} moving through the scene"}
        return {"text": f"object {tag} in a steady state"}

    @app.post("/embed")
    def embed(body: _EmbedBody):
        return {"vector": embedder.embed(body.text).tolist()}

    return app
