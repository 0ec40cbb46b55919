"""Background execution of colorization jobs over a shared weight store."""

from __future__ import annotations

import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .. import colorpipe
from ..colorpipe import LossLayerConfig, RunConfig, TraceRow
from ..convnet import NetworkTopology, WeightStore
from .schemas import RunParams


@dataclass
class EngineContext:
    """Everything loaded once per process and shared by all jobs."""

    weights: WeightStore
    topology_factory: Callable[[str], NetworkTopology]
    layers: LossLayerConfig = field(default_factory=LossLayerConfig)
    weights_path: str | None = None


class JobCancelled(Exception):
    pass


@dataclass
class Job:
    id: str
    kind: str  # "colorize" | "compare"
    params: RunParams
    dir: Path
    state: str = "queued"  # queued | running | done | failed
    message: str | None = None
    iterations_done: int = 0
    trace: list[TraceRow] = field(default_factory=list)
    panel_trace: list[tuple[str, TraceRow]] = field(default_factory=list)
    images: dict[str, Path] = field(default_factory=dict)
    trace_path: Path | None = None
    cancel: threading.Event = field(default_factory=threading.Event)


class JobManager:
    """Thread-pool runner; job records stay queryable after completion."""

    def __init__(self, engine: EngineContext, work_dir: Path | str | None = None,
                 max_workers: int = 1):
        self.engine = engine
        self._own_dir = work_dir is None
        self.work_dir = Path(work_dir or tempfile.mkdtemp(prefix="chromabrush-"))
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def submit(self, kind: str, content: bytes, style: bytes,
               params: RunParams) -> Job:
        job_id = uuid.uuid4().hex[:12]
        job_dir = self.work_dir / job_id
        job_dir.mkdir(parents=True)
        (job_dir / "content.img").write_bytes(content)
        (job_dir / "style.img").write_bytes(style)
        job = Job(id=job_id, kind=kind, params=params, dir=job_dir)
        with self._lock:
            self._jobs[job_id] = job
        self._pool.submit(self._run, job)
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def list(self) -> list[Job]:
        with self._lock:
            return list(self._jobs.values())

    def delete(self, job_id: str) -> bool:
        with self._lock:
            job = self._jobs.pop(job_id, None)
        if job is None:
            return False
        job.cancel.set()
        return True

    def shutdown(self) -> None:
        for job in self.list():
            job.cancel.set()
        self._pool.shutdown(wait=True, cancel_futures=True)

    # -- execution ---------------------------------------------------------

    def _config_for(self, job: Job) -> RunConfig:
        p = job.params
        return RunConfig(
            content_path=job.dir / "content.img",
            style_path=job.dir / "style.img",
            output_path=job.dir / "out.png",
            weights_path=self.engine.weights_path,
            iterations=p.iterations,
            alpha=p.alpha,
            beta0=p.beta0,
            decay_per_iter=p.decay_per_iter,
            optimizer=p.optimizer,
            pooling=p.pooling,
            init=p.init,
            seed=p.seed,
            max_side=p.max_side,
            sgd_lr=p.sgd_lr,
        )

    def _run(self, job: Job) -> None:
        if job.cancel.is_set():
            job.state = "failed"
            job.message = "cancelled"
            return
        job.state = "running"
        try:
            config = self._config_for(job)
            topology = self.engine.topology_factory(job.params.pooling)
            if job.kind == "colorize":
                self._run_colorize(job, config, topology)
            else:
                self._run_compare(job, config, topology)
            job.state = "done"
        except JobCancelled:
            job.state = "failed"
            job.message = "cancelled"
        except Exception as exc:  # surfaced via the status endpoint
            job.state = "failed"
            job.message = str(exc)

    def _progress(self, job: Job, panel: str | None = None):
        def on_row(row: TraceRow) -> None:
            if job.cancel.is_set():
                raise JobCancelled()
            job.trace.append(row)
            if panel is not None:
                job.panel_trace.append((panel, row))
            job.iterations_done = row.iteration + 1
        return on_row

    def _run_colorize(self, job: Job, config: RunConfig,
                      topology: NetworkTopology) -> None:
        result = colorpipe.run_colorization(
            config,
            topology=topology,
            weights=self.engine.weights,
            layers=self.engine.layers,
            progress=self._progress(job),
        )
        job.images[""] = result.output_path
        job.trace_path = job.dir / "trace.csv"
        colorpipe.write_trace_csv(job.trace_path, result.trace)
        if result.failed:
            raise RuntimeError(result.message or "run failed")

    def _run_compare(self, job: Job, config: RunConfig,
                     topology: NetworkTopology) -> None:
        progress_cbs = {p: self._progress(job, p) for p in colorpipe.COMPARE_PANELS}

        def on_row(panel: str, row: TraceRow) -> None:
            progress_cbs[panel](row)

        comp = colorpipe.compare_optimizers(
            config,
            topology=topology,
            weights=self.engine.weights,
            layers=self.engine.layers,
            progress=on_row,
        )
        job.images.update(comp.image_paths)
        job.trace_path = comp.trace_path
        failed = [p for p in colorpipe.COMPARE_PANELS if comp.runs[p].failed]
        if failed:
            details = "; ".join(f"{p}: {comp.runs[p].message}" for p in failed)
            raise RuntimeError(f"panels failed: {details}")
