"""FastAPI application wrapping the toolkit.

Long-running operations (dataset generation, training, grid search,
ablation, evaluation) run as background jobs polled via /jobs/{id};
single-record segmentation is synchronous.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .jobs import JobManager
from .runners import (
    run_ablate,
    run_evaluate,
    run_generate,
    run_grid_search,
    run_segment,
    run_train,
    run_train_critic,
)
from .schemas import (
    AblateRequest,
    EvaluateRequest,
    GenerateRequest,
    GridSearchRequest,
    JobInfo,
    JobSubmitted,
    SegmentRequest,
    SegmentResponse,
    TrainCriticRequest,
    TrainRequest,
)


def create_app(manager: JobManager | None = None) -> FastAPI:
    app = FastAPI(title="psoctseg", description="PS-OCT segmentation service")
    jobs = manager or JobManager()
    app.state.jobs = jobs

    def submit(kind, fn) -> JobSubmitted:
        info = jobs.submit(kind, fn)
        return JobSubmitted(job_id=info.job_id, kind=info.kind, status=info.status)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/datasets/generate", response_model=JobSubmitted)
    def generate(req: GenerateRequest):
        return submit("generate", lambda: run_generate(req))

    @app.post("/critic/train", response_model=JobSubmitted)
    def train_critic(req: TrainCriticRequest):
        return submit("train-critic", lambda: run_train_critic(req))

    @app.post("/models/train", response_model=JobSubmitted)
    def train_model(req: TrainRequest):
        return submit("train", lambda: run_train(req))

    @app.post("/models/grid-search", response_model=JobSubmitted)
    def grid_search(req: GridSearchRequest):
        return submit("grid-search", lambda: run_grid_search(req))

    @app.post("/models/ablate", response_model=JobSubmitted)
    def ablate(req: AblateRequest):
        return submit("ablate", lambda: run_ablate(req))

    @app.post("/evaluate", response_model=JobSubmitted)
    def evaluate(req: EvaluateRequest):
        return submit("evaluate", lambda: run_evaluate(req))

    @app.post("/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        try:
            return run_segment(req)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/jobs", response_model=list[JobInfo])
    def list_jobs():
        return jobs.list()

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def get_job(job_id: str):
        info = jobs.get(job_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return info

    return app
