"""HTTP service exposing the registration engine.

Registration, evaluation, preprocessing and warping run synchronously;
training and fine-tuning can run as background jobs (``wait=false``) polled
via ``/jobs/{id}``. Engine errors map to JSON bodies carrying the stable
error kind.
"""

from __future__ import annotations

import threading
import uuid

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from . import __version__, service
from .errors import Divergence, IconforgeError, MissingFile
from .schemas import (
    ErrorBody,
    EvaluateRequest,
    EvaluateResponse,
    FinetuneRequest,
    HealthResponse,
    JobInfo,
    PreprocessRequest,
    PreprocessResponse,
    RegisterRequest,
    RegisterResponse,
    TrainRequest,
    TrainResponse,
    WarpRequest,
    WarpResponse,
)


class _JobRegistry:
    def __init__(self):
        self._jobs: dict[str, JobInfo] = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn) -> JobInfo:
        job_id = uuid.uuid4().hex[:12]
        info = JobInfo(job_id=job_id, state="queued", kind=kind)
        with self._lock:
            self._jobs[job_id] = info

        def runner():
            with self._lock:
                self._jobs[job_id] = self._jobs[job_id].model_copy(update={"state": "running"})
            try:
                result = fn()
                update = {"state": "done", "result": result}
            except IconforgeError as exc:
                update = {"state": "error", "error": str(exc), "error_kind": exc.kind}
            except Exception as exc:  # pragma: no cover - defensive
                update = {"state": "error", "error": str(exc), "error_kind": "internal"}
            with self._lock:
                self._jobs[job_id] = self._jobs[job_id].model_copy(update=update)

        threading.Thread(target=runner, daemon=True).start()
        return info

    def get(self, job_id: str) -> JobInfo | None:
        with self._lock:
            return self._jobs.get(job_id)


def create_app() -> FastAPI:
    app = FastAPI(title="iconforge", version=__version__)
    jobs = _JobRegistry()

    @app.exception_handler(IconforgeError)
    async def engine_error(request, exc: IconforgeError):
        if isinstance(exc, MissingFile):
            status = 404
        elif isinstance(exc, Divergence):
            status = 500
        else:
            status = 400
        body = ErrorBody(error=exc.kind, message=str(exc))
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/register", response_model=RegisterResponse)
    def register(req: RegisterRequest) -> RegisterResponse:
        return service.run_register(req)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        return service.run_evaluate(req)

    @app.post("/preprocess", response_model=PreprocessResponse)
    def preprocess(req: PreprocessRequest) -> PreprocessResponse:
        return service.run_preprocess(req)

    @app.post("/warp", response_model=WarpResponse)
    def warp(req: WarpRequest) -> WarpResponse:
        return service.run_warp(req)

    @app.post("/train", response_model=TrainResponse | JobInfo)
    def train(req: TrainRequest):
        if req.wait:
            return service.run_train(req)
        return jobs.submit("train", lambda: service.run_train(req))

    @app.post("/finetune", response_model=TrainResponse | JobInfo)
    def finetune(req: FinetuneRequest):
        if req.wait:
            return service.run_finetune(req)
        return jobs.submit("finetune", lambda: service.run_finetune(req))

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job_status(job_id: str):
        info = jobs.get(job_id)
        if info is None:
            return JSONResponse(status_code=404, content=ErrorBody(
                error="missing-job", message=f"unknown job {job_id}").model_dump())
        return info

    return app


app = create_app()
