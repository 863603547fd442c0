"""Pydantic request/response models shared by the HTTP API and the CLI.

Volume, map and checkpoint payloads are referenced by filesystem path (the
service operates on server-local files); metric reports travel inline.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Modality = Literal["ct", "mri", "none"]


class MetricsReportModel(BaseModel):
    neg_jac_fraction: float
    wall_time_s: float = 0.0
    mtre_mm: Optional[float] = None
    dice_mean: Optional[float] = None
    dice_per_label: Optional[dict[str, float]] = None
    trace: list[str] = Field(default_factory=list)

    @classmethod
    def from_report(cls, report) -> "MetricsReportModel":
        return cls(**{
            **report.to_dict(),
        })


class RegisterRequest(BaseModel):
    fixed: str
    moving: str
    out_map: str
    out_warped: Optional[str] = None
    checkpoint: Optional[str] = None
    io_iterations: int = Field(default=0, ge=0)
    io_lr: float = Field(default=1e-5, gt=0)
    modality_fixed: Modality = "none"
    modality_moving: Modality = "none"
    canonical_side: Optional[int] = Field(default=None, ge=8)
    landmarks_fixed: Optional[str] = None
    landmarks_moving: Optional[str] = None
    labels_fixed: Optional[str] = None
    labels_moving: Optional[str] = None
    snapshot: Optional[str] = None
    seed: int = 0


class RegisterResponse(BaseModel):
    report: MetricsReportModel
    out_map: str
    out_warped: Optional[str] = None


class EvaluateRequest(BaseModel):
    map: str
    fixed: str
    moving: str
    landmarks_fixed: Optional[str] = None
    landmarks_moving: Optional[str] = None
    labels_fixed: Optional[str] = None
    labels_moving: Optional[str] = None
    out: Optional[str] = None


class EvaluateResponse(BaseModel):
    report: MetricsReportModel
    out: Optional[str] = None


class PreprocessRequest(BaseModel):
    input: str
    output: str
    modality: Modality
    canonical_side: int = Field(default=175, ge=8)


class PreprocessResponse(BaseModel):
    output: str


class WarpRequest(BaseModel):
    input: str
    map: str
    output: str
    labels: bool = False


class WarpResponse(BaseModel):
    output: str


class TrainRequest(BaseModel):
    manifest: str
    out_dir: str
    pairs_per_dataset: Optional[int] = Field(default=None, ge=1)
    epochs_phase1: Optional[int] = Field(default=None, ge=0)
    epochs_phase2: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = None
    canonical_side: Optional[int] = Field(default=None, ge=8)
    wait: bool = True


class FinetuneRequest(BaseModel):
    checkpoint: str
    manifest: str
    epochs: int = Field(ge=0)
    out_dir: str
    pairs_per_dataset: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None
    wait: bool = True


class TrainResponse(BaseModel):
    final_checkpoint: Optional[str]
    checkpoints: list[str]
    metrics_csv: Optional[str]
    epochs_run: int
    final_total_loss: Optional[float] = None


class JobInfo(BaseModel):
    job_id: str
    state: Literal["queued", "running", "done", "error"]
    kind: Literal["train", "finetune"]
    error: Optional[str] = None
    error_kind: Optional[str] = None
    result: Optional[TrainResponse] = None


class ErrorBody(BaseModel):
    error: str
    message: str


class HealthResponse(BaseModel):
    status: str
    version: str
