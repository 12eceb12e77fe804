"""Pydantic request/response models for the HTTP service.

Requests carry the experiment configuration as config-file text (the same
format the CLI reads), so a thin client never needs to re-implement
parsing. Responses return every file the command produced; text artifacts
come back verbatim, binary ones base64-encoded.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class ArtifactFile(BaseModel):
    path: str
    encoding: str = Field(default="text", pattern="^(text|base64)$")
    content: str


class ConfigRequest(BaseModel):
    config_text: str = ""
    seed: int | None = None  # overrides model.seed, like the CLI --seed flag


class ProfileRequest(ConfigRequest):
    pass


class RunRequest(ConfigRequest):
    partition_text: str | None = None
    frames: bool = False
    trace: bool = False
    timings: bool = False


class AblateRequest(ConfigRequest):
    timings: bool = False


class L1CurveRequest(ConfigRequest):
    pass


class CompareRequest(BaseModel):
    reference_pdit: str  # base64-encoded PDIT tensor file
    test_pdit: str
    peak: float | None = None


class CommandResponse(BaseModel):
    summary: dict
    artifacts: list[ArtifactFile]


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorResponse(BaseModel):
    error_kind: str  # "config" | "contract" | "io" | "internal"
    detail: str
