"""FastAPI application wrapping the colorization engine.

The service loads the weight store once and shares it across jobs; runs
execute on a worker pool and are polled through the job endpoints. Images
travel base64-encoded inside JSON requests and come back as raw PNG bytes.
"""

from __future__ import annotations

import base64
import binascii
import os
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response

from .. import colorpipe, convnet
from ..colorpipe import LossLayerConfig
from ..errors import ChromabrushError
from .jobs import EngineContext, JobManager
from .schemas import (
    ColorizeRequest,
    CompareRequest,
    FeatureMap,
    FeaturesRequest,
    FeaturesResponse,
    Health,
    JobCreated,
    JobStatus,
    LayerInfo,
    TraceRowModel,
    WeightsReport,
)

WEIGHTS_ENV_VAR = "CHROMABRUSH_WEIGHTS"


def _decode_b64(payload: str, what: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(422, f"{what}: invalid base64 payload")


def default_engine(weights_path: str | Path) -> EngineContext:
    """Load the standard trunk from a VGGW file."""
    topology = convnet.vgg19_topology("avg")
    weights = convnet.load_weights(weights_path, topology)
    return EngineContext(
        weights=weights,
        topology_factory=convnet.vgg19_topology,
        layers=LossLayerConfig(),
        weights_path=str(weights_path),
    )


def create_app(
    weights_path: str | Path | None = None,
    *,
    engine: EngineContext | None = None,
    work_dir: str | Path | None = None,
    max_workers: int = 1,
) -> FastAPI:
    """Build the service; tests inject a small ``engine`` directly."""
    if engine is None:
        weights_path = weights_path or os.environ.get(WEIGHTS_ENV_VAR)
        if weights_path:
            engine = default_engine(weights_path)

    app = FastAPI(title="chromabrush", version="0.1.0")
    manager = JobManager(engine, work_dir, max_workers) if engine else None
    app.state.engine = engine
    app.state.manager = manager

    def need_manager() -> JobManager:
        if manager is None:
            raise HTTPException(
                503, f"no weights loaded; start with ${WEIGHTS_ENV_VAR} set"
            )
        return manager

    def find_job(job_id: str):
        job = need_manager().get(job_id)
        if job is None:
            raise HTTPException(404, f"no such job {job_id!r}")
        return job

    @app.get("/healthz", response_model=Health)
    def healthz() -> Health:
        return Health(
            status="ok",
            weights_loaded=engine is not None,
            jobs=len(manager.list()) if manager else 0,
        )

    @app.get("/weights", response_model=WeightsReport)
    def weights_report() -> WeightsReport:
        m = need_manager()
        store = m.engine.weights
        checksums = convnet.layer_checksums(store)
        layers = [
            LayerInfo(
                name=name,
                weight_shape=list(w.shape),
                bias_size=b.shape[0],
                crc32=checksums[name],
            )
            for name, (w, b) in sorted(store.items())
        ]
        return WeightsReport(
            path=m.engine.weights_path, layer_count=len(layers), layers=layers
        )

    @app.post("/jobs/colorize", response_model=JobCreated, status_code=202)
    def submit_colorize(req: ColorizeRequest) -> JobCreated:
        m = need_manager()
        job = m.submit(
            "colorize",
            _decode_b64(req.content_image, "content_image"),
            _decode_b64(req.style_image, "style_image"),
            req.params,
        )
        return JobCreated(id=job.id, kind="colorize")

    @app.post("/jobs/compare", response_model=JobCreated, status_code=202)
    def submit_compare(req: CompareRequest) -> JobCreated:
        m = need_manager()
        job = m.submit(
            "compare",
            _decode_b64(req.content_image, "content_image"),
            _decode_b64(req.style_image, "style_image"),
            req.params,
        )
        return JobCreated(id=job.id, kind="compare")

    def _status(job) -> JobStatus:
        last = job.trace[-1] if job.trace else None
        return JobStatus(
            id=job.id,
            kind=job.kind,
            state=job.state,
            iterations_done=job.iterations_done,
            iterations_total=job.params.iterations,
            message=job.message,
            last=TraceRowModel(**last.__dict__) if last else None,
            panels=sorted(k for k in job.images if k),
        )

    @app.get("/jobs", response_model=list[JobStatus])
    def list_jobs() -> list[JobStatus]:
        return [_status(job) for job in need_manager().list()]

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str) -> JobStatus:
        return _status(find_job(job_id))

    @app.get("/jobs/{job_id}/trace")
    def job_trace(job_id: str) -> Response:
        job = find_job(job_id)
        if job.trace_path is not None and job.trace_path.exists():
            text = job.trace_path.read_text(encoding="ascii")
        else:
            text = colorpipe.trace_csv_text(job.trace)
        return Response(content=text, media_type="text/csv")

    @app.get("/jobs/{job_id}/image")
    def job_image(job_id: str, panel: str = "") -> Response:
        job = find_job(job_id)
        if job.state != "done":
            raise HTTPException(409, f"job is {job.state}, image not ready")
        if panel not in job.images:
            have = sorted(k for k in job.images if k) or ["(default)"]
            raise HTTPException(404, f"no panel {panel!r}; have {have}")
        return Response(
            content=Path(job.images[panel]).read_bytes(), media_type="image/png"
        )

    @app.delete("/jobs/{job_id}", status_code=204)
    def delete_job(job_id: str) -> Response:
        if not need_manager().delete(job_id):
            raise HTTPException(404, f"no such job {job_id!r}")
        return Response(status_code=204)

    @app.post("/features", response_model=FeaturesResponse)
    def features(req: FeaturesRequest) -> FeaturesResponse:
        m = need_manager()
        raw = _decode_b64(req.image, "image")
        tmp = m.work_dir / "probe.img"
        tmp.write_bytes(raw)
        try:
            buffer = colorpipe.preprocess(
                tmp, req.max_side, force_grayscale=req.force_grayscale
            )
            topology = m.engine.topology_factory(req.pooling)
            feats, _ = convnet.forward_collect(
                buffer.pixels, topology, m.engine.weights, set(req.layers)
            )
        except ChromabrushError as exc:
            raise HTTPException(422, str(exc))
        return FeaturesResponse(
            features={
                name: FeatureMap(shape=list(t.shape), values=t.data.tolist())
                for name, t in feats.items()
            }
        )

    return app
