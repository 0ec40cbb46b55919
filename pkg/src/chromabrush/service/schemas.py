"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class RunParams(BaseModel):
    """Optimization knobs; mirrors the engine's run configuration."""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(1000, ge=1, le=100_000)
    alpha: float = Field(1.0, ge=0.0)
    beta0: float | None = Field(None, ge=0.0, description="default: 1e3 * alpha")
    decay_per_iter: float = Field(0.0025, ge=0.0, lt=1.0)
    optimizer: Literal["lbfgs", "sgd"] = "lbfgs"
    pooling: Literal["avg", "max"] = "avg"
    init: Literal["noise", "content"] = "noise"
    seed: int = 0
    max_side: int = Field(512, ge=32, le=4096)
    sgd_lr: float = Field(1.0, gt=0.0)


class ColorizeRequest(BaseModel):
    """One colorization job; images travel as base64-encoded PNG/JPEG bytes."""

    model_config = ConfigDict(extra="forbid")

    content_image: str = Field(description="base64 PNG/JPEG, grayscale content")
    style_image: str = Field(description="base64 PNG/JPEG, color style")
    params: RunParams = Field(default_factory=RunParams)


class CompareRequest(ColorizeRequest):
    """The 2x2 optimizer/schedule comparison over the same image pair."""


class FeaturesRequest(BaseModel):
    """Feature-extraction probe: activations of named layers for one image."""

    model_config = ConfigDict(extra="forbid")

    image: str = Field(description="base64 PNG/JPEG")
    layers: list[str] = Field(min_length=1)
    pooling: Literal["avg", "max"] = "avg"
    force_grayscale: bool = False
    max_side: int = Field(512, ge=32, le=4096)


class FeatureMap(BaseModel):
    shape: list[int]
    values: list[float]


class FeaturesResponse(BaseModel):
    features: dict[str, FeatureMap]


class TraceRowModel(BaseModel):
    iteration: int
    beta: float
    total: float
    content: float
    style: float
    grad_norm: float
    step: float


class JobCreated(BaseModel):
    id: str
    kind: Literal["colorize", "compare"]


class JobStatus(BaseModel):
    id: str
    kind: Literal["colorize", "compare"]
    state: Literal["queued", "running", "done", "failed"]
    iterations_done: int
    iterations_total: int
    message: str | None = None
    last: TraceRowModel | None = None
    panels: list[str] = []


class LayerInfo(BaseModel):
    name: str
    weight_shape: list[int]
    bias_size: int
    crc32: str


class WeightsReport(BaseModel):
    path: str | None
    layer_count: int
    layers: list[LayerInfo]


class Health(BaseModel):
    status: str
    weights_loaded: bool
    jobs: int
