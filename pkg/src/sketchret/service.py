"""HTTP retrieval service over an immutable model + index snapshot.

All ranking happens in the index module; the service only decodes the
sketch, runs the model, and shapes JSON. Rebuilds swap the index
reference atomically so concurrent readers always see a consistent one.
"""

from __future__ import annotations

import base64
import binascii
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import tokenizer
from .data import load_dataset
from .errors import ConfigError, InputError
from .index import RetrievalIndex, build_index, knn, load_index, rerank, save_index
from .model import RetrievalModel, checkpoint_fingerprint
from .tensor import Tensor

log = logging.getLogger(__name__)

MAX_SKETCH_BYTES = 2 * 1024 * 1024


@dataclass
class ServiceConfig:
    checkpoint: str
    index: str
    host: str = "127.0.0.1"
    port: int = 8000
    default_k: int = 10
    rerank_m: int = 10
    asset_root: str | None = None  # dataset root for thumbnails and rebuilds
    force: bool = False  # accept fingerprint mismatches

    def __post_init__(self):
        if self.default_k < 1 or self.rerank_m < 0:
            raise ConfigError("default_k >= 1 and rerank_m >= 0 required")


class QueryRequest(BaseModel):
    sketch_png_base64: str
    k: int | None = None
    rerank: bool = False


def _asset_path(root: Path, item_id: str) -> Path | None:
    # ids are "<modality>/<class>/<stem>" from the directory loader
    parts = item_id.split("/")
    if len(parts) != 3:
        return None
    modality, cls, stem = parts
    sub = "sketches" if modality == "sketch" else "images"
    for ext in (".png", ".jpg", ".jpeg"):
        p = root / sub / cls / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def create_app(cfg: ServiceConfig) -> FastAPI:
    model = RetrievalModel.load(cfg.checkpoint)
    idx = load_index(cfg.index)
    fp = checkpoint_fingerprint(cfg.checkpoint)
    if idx.fingerprint != fp:
        if cfg.force:
            log.warning("index fingerprint does not match checkpoint; continuing (--force)")
        else:
            raise ConfigError("index fingerprint does not match checkpoint (use force to override)")

    app = FastAPI(title="sketchret")
    app.state.model = model
    app.state.index = idx
    app.state.cfg = cfg
    app.state.rebuild_lock = threading.Lock()

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        error_id = uuid.uuid4().hex
        log.exception("internal error %s on %s", error_id, request.url.path)
        return JSONResponse(status_code=500, content={"error": "internal failure", "id": error_id})

    @app.get("/health")
    def health():
        return {"status": "ok", "d": app.state.index.d, "index_size": len(app.state.index)}

    @app.get("/classes")
    def classes():
        return {"classes": sorted({e.label for e in app.state.index.entries})}

    @app.get("/image/{item_id:path}")
    def image(item_id: str):
        if cfg.asset_root is None:
            return JSONResponse(status_code=404, content={"error": "no asset root configured"})
        path = _asset_path(Path(cfg.asset_root), item_id)
        if path is None:
            return JSONResponse(status_code=404, content={"error": f"unknown image {item_id!r}"})
        media = "image/png" if path.suffix == ".png" else "image/jpeg"
        return Response(content=path.read_bytes(), media_type=media)

    @app.post("/query")
    def query(req: QueryRequest):
        started = time.perf_counter()
        try:
            png = base64.b64decode(req.sketch_png_base64, validate=True)
        except (binascii.Error, ValueError):
            return JSONResponse(status_code=400, content={"error": "invalid base64 payload"})
        if len(png) > MAX_SKETCH_BYTES:
            return JSONResponse(status_code=413, content={"error": "sketch exceeds 2 MiB"})
        m: RetrievalModel = app.state.model
        snapshot: RetrievalIndex = app.state.index
        try:
            x = tokenizer.preprocess_sketch(png, m.cfg.input_size)
        except InputError as exc:
            return JSONResponse(status_code=400, content={"error": str(exc)})
        k = req.k if req.k is not None else cfg.default_k
        if k < 1:
            return JSONResponse(status_code=400, content={"error": "k must be >= 1"})
        embedding = m.encode_sketch(x)
        rt = embedding.tokens.values[0]
        result = knn(snapshot, rt, k)
        if req.rerank and cfg.rerank_m > 0 and cfg.asset_root is not None:
            root = Path(cfg.asset_root)

            def loader(item_id: str):
                path = _asset_path(root, item_id)
                if path is None:
                    raise InputError(f"no asset for {item_id!r}")
                return path

            result = rerank(m, embedding, result, min(cfg.rerank_m, len(result.entries)), loader)
        latency = (time.perf_counter() - started) * 1000.0
        return {
            "results": [
                {
                    "id": e.id,
                    "label": e.label,
                    "distance": e.distance,
                    "thumbnail_url": f"/image/{e.id}",
                    "mode": e.mode,
                }
                for e in result.entries
            ],
            "latency_ms": latency,
        }

    @app.post("/index/rebuild")
    def index_rebuild():
        if cfg.asset_root is None:
            return JSONResponse(status_code=400, content={"error": "no asset root configured"})
        with app.state.rebuild_lock:
            ds = load_dataset(cfg.asset_root)
            fresh, report = build_index(app.state.model, ds, fingerprint=fp)
            save_index(fresh, cfg.index)
            app.state.index = fresh  # atomic swap
        return {"index_size": len(fresh), "skipped": report.skipped}

    return app


def serve(cfg: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port)
