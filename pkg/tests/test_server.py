import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from dynafield.query import QueryEngine
from dynafield.server import make_app
from dynafield.serviceio import rle_decode
from dynafield.state import EngineState
from dynafield.synth import make_text_embedders
from dynafield.trainer import FieldTrainer
from dynafield.state import TrainConfig


@pytest.fixture(scope="module")
def served(tiny_scene):
    config = TrainConfig(
        stage_iterations=(8, 4, 8, 8),
        grid_resolutions=(4, 8),
        grid_feature_width=4,
        pixels_per_iteration=256,
    )
    trainer = FieldTrainer(
        tiny_scene.bundle,
        config,
        tiny_scene.init_positions,
        tiny_scene.init_colors,
        tiny_scene.aabb_min,
        tiny_scene.aabb_max,
        compressor_steps=30,
    )
    trainer.run_all()
    static_emb, caption_emb = make_text_embedders(tiny_scene)
    engine = QueryEngine(
        trainer.engine_state(), tiny_scene.bundle.cameras, static_emb, caption_emb
    )
    app = make_app(engine, tiny_scene.bundle)
    return TestClient(app), tiny_scene.bundle


class TestEndpoints:
    def test_healthz(self, served):
        client, _ = served
        assert client.get("/healthz").json() == {"status": "ok"}

    def test_meta(self, served):
        client, bundle = served
        meta = client.get("/meta").json()
        assert meta["frames"] == bundle.num_frames
        assert meta["width"] == 48 and meta["height"] == 48
        assert meta["num_states"] == 3
        assert meta["levels"] == ["subpart", "part", "whole"]

    def test_frame_png(self, served):
        client, bundle = served
        resp = client.get("/frame/0.png")
        assert resp.status_code == 200
        img = np.asarray(Image.open(io.BytesIO(resp.content)).convert("RGB"))
        assert np.array_equal(img, bundle.frames[0])

    def test_frame_out_of_range(self, served):
        client, _ = served
        assert client.get("/frame/99.png").status_code == 400

    def test_render_rgb_and_pca(self, served):
        client, _ = served
        for payload in ("rgb", "pca"):
            resp = client.get(f"/render/{payload}/0.png")
            assert resp.status_code == 200, payload
            img = Image.open(io.BytesIO(resp.content))
            assert img.size == (48, 48)

    def test_render_relevance_requires_query(self, served):
        client, _ = served
        assert client.get("/render/relevance/0.png").status_code == 400
        resp = client.get("/render/relevance/0.png", params={"query": "cup"})
        assert resp.status_code == 200

    def test_render_unknown_payload(self, served):
        client, _ = served
        assert client.get("/render/nonsense/0.png").status_code == 400

    def test_query_contract(self, served):
        client, bundle = served
        resp = client.post("/query", json={"text": "cup", "mode": "timeAgnostic"})
        assert resp.status_code == 200
        data = resp.json()
        assert set(data) == {"masks", "scores", "selectedFrames", "threshold", "level", "mode"}
        assert len(data["masks"]) == bundle.num_frames
        mask = rle_decode(data["masks"][0])
        assert mask.shape == (48, 48)
        assert data["mode"] == "timeAgnostic"
        assert data["selectedFrames"] == []

    def test_query_time_sensitive(self, served):
        client, bundle = served
        resp = client.post(
            "/query",
            json={"text": "The cup is tilted and pouring liquid.", "mode": "timeSensitive"},
        )
        assert resp.status_code == 200
        data = resp.json()
        assert data["threshold"] is not None
        assert all(0 <= f < bundle.num_frames for f in data["selectedFrames"])

    def test_query_validation(self, served):
        client, _ = served
        assert client.post("/query", json={"text": "cup", "mode": "bogus"}).status_code == 400
        assert client.post("/query", json={"text": "", "mode": "timeSensitive"}).status_code == 400
