"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field

Scalar = str | int | float | bool


class ConfiguredRequest(BaseModel):
    """Any request that builds a TrainConfig: optional file plus flat overrides."""

    config_file: str | None = None
    config: dict[str, Scalar] = Field(default_factory=dict)


class GenerateDataRequest(ConfiguredRequest):
    pass


class GenerateDataResponse(BaseModel):
    root: str
    images: dict[str, int]
    annotations: dict[str, int]


class BurnInRequest(ConfiguredRequest):
    resume: str | None = None
    max_epochs: int | None = None


class AdaptRequest(ConfiguredRequest):
    burn_in_checkpoint: str
    resume: str | None = None
    max_epochs: int | None = None


class TrainResponse(BaseModel):
    checkpoint: str
    metrics: str
    last_record: dict[str, Any] | None


class EvalRequest(BaseModel):
    checkpoint: str
    data_root: str | None = None
    domain: Literal["source", "target"] = "target"
    split: Literal["train", "val"] = "val"
    iou_threshold: float = Field(0.5, gt=0.0, le=1.0)
    which: Literal["teacher", "student"] | None = None


class EvalResponse(BaseModel):
    checkpoint: str
    stage: str | None
    epoch: int | None
    domain: str
    split: str
    iou_threshold: float
    map: float
    per_class: dict[str, float | None]
    images: int


class ExportRequest(BaseModel):
    checkpoint: str
    out: str
    data_root: str | None = None
    layer: Literal["encoder_mean", "decoder_queries"] = "encoder_mean"
    split: Literal["train", "val"] = "train"
    which: Literal["teacher", "student"] | None = None


class ExportResponse(BaseModel):
    path: str
    count: int
    dim: int
    layer: str


class ProbeRequest(BaseModel):
    dumps: dict[str, str]
    seeds: list[int] = Field(default_factory=lambda: [0])
    epochs: int = Field(200, ge=1)
    out: str | None = None


class SweepRequest(ConfiguredRequest):
    sizes: list[int] = Field(default_factory=lambda: [1, 4, 10, 16])
    out: str | None = None


class StrategyRequest(ConfiguredRequest):
    strategies: list[Literal["distribution", "random", "kmeans"]] = Field(
        default_factory=lambda: ["random", "kmeans", "distribution"]
    )
    out: str | None = None


class AblationRequest(ConfiguredRequest):
    out: str | None = None


class ReportResponse(BaseModel):
    rows: list[dict[str, Any]]
    report: str | None = None


class PlotRequest(BaseModel):
    inputs: list[str]
    out_dir: str = "plots"


class PlotResponse(BaseModel):
    files: list[str]


class ErrorRecord(BaseModel):
    error: str
    message: str
