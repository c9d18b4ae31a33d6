"""HTTP JSON API for the design studio.

Endpoints: asset upload/fetch, job submit/poll/list/cancel, preview frames,
and the static designer UI when a frontend build is present.  Configuration
comes from PORT, MODEL_DIR, and DATA_DIR environment variables unless
overridden programmatically.
"""

from __future__ import annotations

import os
from contextlib import asynccontextmanager

from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .. import features as ft
from .. import pipeline as pl
from ..errors import (
    CarpetStudioError,
    NotFoundError,
    TooLargeError,
    UnsupportedFormatError,
)
from .store import Store
from .worker import WorkerPool, default_worker_count


def _job_view(job):
    return {
        "id": job["id"],
        "config": job["config"],
        "status": job["status"],
        "stage": job["stage"],
        "progress": job["progress"],
        "error": job["error"],
        "artifacts": job["artifacts"],
        "frames": job["frames"],
        "created": job["created"],
        "updated": job["updated"],
    }


def _asset_view(rec):
    return {
        "id": rec["id"],
        "kind": rec["kind"],
        "mediaType": rec["media_type"],
        "byteSize": rec["byte_size"],
        "checksum": rec["checksum"],
    }


def create_app(data_dir=None, model_dir=None, worker_count=None, start_workers=True,
               frontend_dir=None):
    data_dir = data_dir or os.environ.get("DATA_DIR") or os.path.join(
        os.path.expanduser("~"), ".local", "share", "carpet-studio"
    )
    os.makedirs(data_dir, exist_ok=True)
    store = Store(data_dir)
    recovered = store.recover_stale_running()

    @asynccontextmanager
    async def lifespan(app):
        if start_workers:
            models = ft.load_models(model_dir=model_dir)
            app.state.pool = WorkerPool(store, models, count=worker_count)
            app.state.pool.start()
        yield
        if start_workers:
            app.state.pool.stop()

    app = FastAPI(title="carpet-studio", lifespan=lifespan)
    app.state.store = store
    app.state.recovered_jobs = recovered

    @app.exception_handler(CarpetStudioError)
    async def on_domain_error(request: Request, exc: CarpetStudioError):
        if isinstance(exc, NotFoundError):
            return JSONResponse({"error": str(exc)}, status_code=404)
        if isinstance(exc, TooLargeError):
            return JSONResponse({"error": str(exc)}, status_code=413)
        if isinstance(exc, UnsupportedFormatError):
            return JSONResponse({"error": str(exc)}, status_code=415)
        return JSONResponse({"error": str(exc)}, status_code=400)

    @app.get("/api/health")
    async def health():
        return {"status": "ok", "workers": default_worker_count() if start_workers else 0}

    @app.post("/api/assets", status_code=201)
    async def upload_asset(file: UploadFile = File(...), kind: str = Form("content")):
        if kind not in ("content", "style", "artifact", "preview"):
            raise HTTPException(422, detail=f"unknown asset kind {kind!r}")
        data = await file.read()
        rec = store.add_asset(data, kind=kind)
        return _asset_view(rec)

    @app.get("/api/assets/{asset_id}")
    async def fetch_asset(asset_id: str):
        rec = store.get_asset(asset_id)
        data = store.asset_bytes(asset_id)
        return Response(content=data, media_type=rec["media_type"])

    @app.post("/api/jobs", status_code=201)
    async def submit_job(request: Request):
        doc = await request.json()
        errors = pl.validate_config(doc)
        if not errors:
            for fld in ("content", "style1", "style2", "colorSource"):
                ref = doc[fld]
                if "asset" in ref and not store.asset_exists(ref["asset"]):
                    errors[fld] = f"asset {ref['asset']} not found"
                if "path" in ref and not os.path.exists(ref["path"]):
                    errors[fld] = f"file {ref['path']} not found"
        if errors:
            return JSONResponse({"errors": errors}, status_code=422)
        job = store.submit_job(doc)
        return _job_view(job)

    @app.get("/api/jobs")
    async def list_jobs(status: str | None = None):
        if status is not None and status not in ("queued", "running", "succeeded", "failed"):
            raise HTTPException(422, detail=f"unknown status {status!r}")
        return [_job_view(j) for j in store.list_jobs(status)]

    @app.get("/api/jobs/{job_id}")
    async def get_job(job_id: str):
        return _job_view(store.get_job(job_id))

    @app.post("/api/jobs/{job_id}/cancel")
    async def cancel_job(job_id: str):
        return _job_view(store.cancel_job(job_id))

    @app.get("/api/jobs/{job_id}/frames/{k}")
    async def get_frame(job_id: str, k: int):
        store.get_job(job_id)
        data = store.frame_bytes(job_id, k)
        return Response(content=data, media_type="image/png")

    frontend_dir = frontend_dir or os.environ.get("FRONTEND_DIR")
    if frontend_dir is None:
        here = os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(
            os.path.abspath(__file__)))))
        candidate = os.path.join(here, "frontend", "dist")
        if os.path.isdir(candidate):
            frontend_dir = candidate
    if frontend_dir and os.path.isdir(frontend_dir):
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


def serve(host="127.0.0.1", port=None, **kwargs):
    import uvicorn

    port = port or int(os.environ.get("PORT", "8675"))
    uvicorn.run(create_app(**kwargs), host=host, port=port, log_level="warning")
