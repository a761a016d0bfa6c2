"""HTTP service behavior via the in-process test client."""

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient

from sketchret import data as D
from sketchret import service as sv
from sketchret.errors import ConfigError
from sketchret.index import build_index, save_index
from sketchret.model import ModelConfig, RetrievalModel, checkpoint_fingerprint


def sketch_png_b64(ds) -> str:
    buf = io.BytesIO()
    ds.sketches()[0].load_raster().save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@pytest.fixture(scope="module")
def deployment(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    ds = D.generate_synthetic(3, 2, 4, size=32, seed=0)
    D.save_dataset(ds, root / "assets")
    ds_disk = D.load_dataset(root / "assets")
    cfg = ModelConfig(input_size=32, d=16, blocks=1, heads=2, cross_heads=2,
                      filter_layers=[1], keep_ratio=1.0)
    model = RetrievalModel.init(cfg, seed=0)
    ckpt = root / "model.ckpt"
    model.save(ckpt)
    idx, _ = build_index(model, ds_disk, fingerprint=checkpoint_fingerprint(ckpt))
    index_path = root / "gallery.idx"
    save_index(idx, index_path)
    scfg = sv.ServiceConfig(checkpoint=str(ckpt), index=str(index_path),
                            asset_root=str(root / "assets"), rerank_m=3)
    return ds_disk, scfg, sv.create_app(scfg)


@pytest.fixture()
def client(deployment):
    _, _, app = deployment
    return TestClient(app, raise_server_exceptions=False)


class TestEndpoints:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["d"] == 16 and body["index_size"] == 12

    def test_classes(self, client, deployment):
        ds, _, _ = deployment
        body = client.get("/classes").json()
        assert body["classes"] == sorted(ds.classes)

    def test_query_returns_ranked_results(self, client, deployment):
        ds, _, _ = deployment
        resp = client.post("/query", json={"sketch_png_base64": sketch_png_b64(ds), "k": 5})
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["results"]) == 5
        dists = [r["distance"] for r in body["results"]]
        assert dists == sorted(dists)
        first = body["results"][0]
        assert set(first) == {"id", "label", "distance", "thumbnail_url", "mode"}
        assert first["thumbnail_url"] == f"/image/{first['id']}"
        assert first["mode"] == "pre"
        assert body["latency_ms"] > 0

    def test_query_with_rerank_marks_head(self, client, deployment):
        ds, _, _ = deployment
        resp = client.post(
            "/query", json={"sketch_png_base64": sketch_png_b64(ds), "k": 5, "rerank": True}
        )
        body = resp.json()
        modes = [r["mode"] for r in body["results"]]
        assert modes == ["post"] * 3 + ["pre"] * 2

    def test_thumbnail_served(self, client, deployment):
        ds, _, _ = deployment
        resp = client.post("/query", json={"sketch_png_base64": sketch_png_b64(ds), "k": 1})
        url = resp.json()["results"][0]["thumbnail_url"]
        img = client.get(url)
        assert img.status_code == 200
        assert img.headers["content-type"] == "image/png"
        assert img.content[:4] == b"\x89PNG"

    def test_unknown_thumbnail_404(self, client):
        assert client.get("/image/image/ghost/none").status_code == 404

    def test_invalid_base64_400(self, client):
        resp = client.post("/query", json={"sketch_png_base64": "@@not-base64@@"})
        assert resp.status_code == 400

    def test_valid_base64_garbage_payload_400(self, client):
        resp = client.post(
            "/query", json={"sketch_png_base64": base64.b64encode(b"notapng").decode()}
        )
        assert resp.status_code == 400

    def test_oversize_payload_413(self, client):
        big = base64.b64encode(bytes(sv.MAX_SKETCH_BYTES + 1)).decode()
        assert client.post("/query", json={"sketch_png_base64": big}).status_code == 413

    def test_bad_k_400(self, client, deployment):
        ds, _, _ = deployment
        resp = client.post("/query", json={"sketch_png_base64": sketch_png_b64(ds), "k": 0})
        assert resp.status_code == 400

    def test_rebuild_swaps_index(self, client):
        before = client.get("/health").json()["index_size"]
        body = client.post("/index/rebuild").json()
        assert body["index_size"] == before
        assert body["skipped"] == []
        assert client.get("/health").json()["index_size"] == before

    def test_internal_errors_are_opaque(self, deployment):
        _, _, app = deployment
        c = TestClient(app, raise_server_exceptions=False)
        saved = app.state.index
        app.state.index = None  # force an unexpected failure
        try:
            resp = c.get("/health")
            assert resp.status_code == 500
            body = resp.json()
            assert body["error"] == "internal failure" and "id" in body
            assert "Traceback" not in resp.text
        finally:
            app.state.index = saved


class TestFingerprintGate:
    def test_mismatch_rejected_without_force(self, deployment, tmp_path):
        ds, scfg, _ = deployment
        cfg = ModelConfig(input_size=32, d=16, blocks=1, heads=2, cross_heads=2,
                          filter_layers=[1], keep_ratio=1.0)
        other = RetrievalModel.init(cfg, seed=9)
        other_ckpt = tmp_path / "other.ckpt"
        other.save(other_ckpt)
        bad = sv.ServiceConfig(checkpoint=str(other_ckpt), index=scfg.index)
        with pytest.raises(ConfigError, match="fingerprint"):
            sv.create_app(bad)
        forced = sv.ServiceConfig(checkpoint=str(other_ckpt), index=scfg.index, force=True)
        assert sv.create_app(forced) is not None

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            sv.ServiceConfig(checkpoint="x", index="y", default_k=0)
