"""Pydantic request/response models for the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    out_dir: str
    count: int = 200
    seed: int = 0
    r: int = Field(default=64, alias="r", description="radial samples")
    a: int = Field(default=128, alias="a", description="A-lines")
    noise: float = 1.0
    frames_per_patient: int = 4

    model_config = {"populate_by_name": True}


class TrainCriticRequest(BaseModel):
    data_dir: str
    out_path: str
    severity: float = 0.5
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    gp_weight: float = 10.0
    seed: int = 0


class LossSettings(BaseModel):
    lambda_wce: float = 1.0
    lambda_dice: float = 1.0
    lambda_bp: float = 1.0
    lambda_ap: float = 1.0
    lambda_bc: float = 1.0
    epsilon: float = 1e-7
    b: int = 10
    m: Optional[float] = None
    sigma: str = "norm1"
    gp_weight: float = 10.0


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    loss: LossSettings = Field(default_factory=LossSettings)
    critic_checkpoint: Optional[str] = None
    lr: float = 1e-4
    batch_size: int = 20
    epochs: int = 30
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    augment: bool = True
    patience: int = 10


class EvaluateRequest(BaseModel):
    data_dir: str
    checkpoint: str
    split_file: Optional[str] = None
    split: str = "test"
    postprocess: bool = True
    out_dir: Optional[str] = None
    exclude_thickened_px: Optional[float] = None


class GridSearchRequest(BaseModel):
    train: TrainRequest
    coords: tuple[str, ...] = ("dice", "bp", "ap", "bc")
    candidates: Optional[dict[str, tuple[float, ...]]] = None


class AblateRequest(BaseModel):
    train: TrainRequest
    seeds: tuple[int, ...] = (0, 1, 2)
    postprocess: bool = False


class SegmentRequest(BaseModel):
    record_path: str
    checkpoint: str
    postprocess: bool = True
    out_path: Optional[str] = None


class SegmentResponse(BaseModel):
    shape: tuple[int, int]
    class_counts: dict[str, int]
    topology: dict[str, Any]
    metrics: Optional[dict[str, Any]] = None
    out_path: Optional[str] = None


class JobSubmitted(BaseModel):
    job_id: str
    kind: str
    status: str


class JobInfo(BaseModel):
    job_id: str
    kind: str
    status: str
    created: float
    started: Optional[float] = None
    finished: Optional[float] = None
    error: Optional[str] = None
    result: Optional[dict[str, Any]] = None
