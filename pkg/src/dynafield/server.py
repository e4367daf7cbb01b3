"""HTTP query service for a trained checkpoint + bundle."""

from __future__ import annotations

import io

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel

from .query import MODE_TIME_AGNOSTIC, MODE_TIME_SENSITIVE, QueryEngine
from .scene import SEMANTIC_LEVELS, SceneBundle
from .serviceio import rle_encode


class QueryBody(BaseModel):
    text: str
    mode: str = MODE_TIME_SENSITIVE


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def make_app(engine: QueryEngine, bundle: SceneBundle) -> FastAPI:
    app = FastAPI(title="dynafield query service")
    pca_cache: dict[str, list[np.ndarray]] = {}

    def pca_frames() -> list[np.ndarray]:
        if "frames" not in pca_cache:
            pca_cache["frames"] = engine.export_pca_visualization()
        return pca_cache["frames"]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/meta")
    def meta():
        width, height = bundle.image_size
        return {
            "frames": bundle.num_frames,
            "width": width,
            "height": height,
            "num_states": engine.state.cloud.num_states,
            "levels": list(SEMANTIC_LEVELS),
        }

    def _check_frame(t: int) -> None:
        if not 0 <= t < bundle.num_frames:
            raise HTTPException(status_code=400, detail=f"frame {t} out of range")

    @app.get("/frame/{t}.png")
    def frame(t: int):
        _check_frame(t)
        return Response(content=_png_bytes(bundle.frames[t]), media_type="image/png")

    @app.get("/render/{payload}/{t}.png")
    def render(payload: str, t: int, query: str | None = None):
        _check_frame(t)
        if payload == "rgb":
            import torch

            from . import renderer

            with torch.no_grad():
                image = renderer.render(
                    engine.state.cloud, engine.state.deformation, bundle.cameras[t], "color"
                )
            arr = np.clip(np.rint(image.values.numpy() * 255.0), 0, 255).astype(np.uint8)
        elif payload == "pca":
            arr = pca_frames()[t]
        elif payload == "relevance":
            if not query:
                raise HTTPException(status_code=400, detail="relevance render needs ?query=")
            request = engine.build_request(query, MODE_TIME_AGNOSTIC, frames=[t])
            rel = engine.relevance_for(t, engine._choose_level(request), request.static_embedding)
            arr = np.clip(np.rint(rel * 255.0), 0, 255).astype(np.uint8)
        else:
            raise HTTPException(status_code=400, detail=f"unknown payload '{payload}'")
        return Response(content=_png_bytes(arr), media_type="image/png")

    @app.post("/query")
    def query(body: QueryBody):
        if body.mode not in (MODE_TIME_AGNOSTIC, MODE_TIME_SENSITIVE):
            raise HTTPException(status_code=400, detail=f"unknown mode '{body.mode}'")
        if not body.text:
            raise HTTPException(status_code=400, detail="empty query text")
        request = engine.build_request(body.text, body.mode)
        try:
            result = engine.query(request)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {
            "masks": [rle_encode(result.masks[f]) for f in request.frames],
            "scores": [result.scores[f] for f in request.frames],
            "selectedFrames": result.selected_frames,
            "threshold": result.threshold,
            "level": result.level,
            "mode": result.mode,
        }

    return app
