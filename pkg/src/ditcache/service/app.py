"""FastAPI service wrapping the experiment pipeline.

Each endpoint is the HTTP face of one pipeline command; the CLI calls the
same pipeline functions in-process, so a given request produces identical
artifact bytes no matter which door it comes through. Handlers are
synchronous and every run owns its engine, so concurrent requests do not
share mutable state.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..config import ExperimentConfig, parse_config_text
from ..errors import ConfigError, ContractViolation
from .schemas import (
    AblateRequest,
    ArtifactFile,
    CommandResponse,
    CompareRequest,
    HealthResponse,
    L1CurveRequest,
    ProfileRequest,
    RunRequest,
)

_TEXT_SUFFIXES = (".json", ".csv", ".txt")


def _encode_artifacts(artifacts: dict[str, bytes]) -> list[ArtifactFile]:
    files = []
    for path, data in artifacts.items():
        if path.endswith(_TEXT_SUFFIXES):
            files.append(ArtifactFile(path=path, encoding="text", content=data.decode("utf-8")))
        else:
            files.append(
                ArtifactFile(path=path, encoding="base64", content=base64.b64encode(data).decode("ascii"))
            )
    return files


def _response(result: pipeline.CommandResult) -> CommandResponse:
    return CommandResponse(summary=result.summary, artifacts=_encode_artifacts(result.artifacts))


def _config(req) -> ExperimentConfig:
    cfg = parse_config_text(req.config_text)
    if req.seed is not None:
        cfg.model.seed = req.seed
    return cfg


def create_app() -> FastAPI:
    app = FastAPI(title="ditcache", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(_, exc):
        return JSONResponse(status_code=400, content={"error_kind": "config", "detail": str(exc)})

    @app.exception_handler(ContractViolation)
    async def _contract_error(_, exc):
        return JSONResponse(status_code=409, content={"error_kind": "contract", "detail": str(exc)})

    @app.exception_handler(ValueError)
    async def _value_error(_, exc):
        return JSONResponse(status_code=409, content={"error_kind": "contract", "detail": str(exc)})

    @app.get("/v1/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/profile", response_model=CommandResponse)
    def profile(req: ProfileRequest):
        return _response(pipeline.cmd_profile(_config(req)))

    @app.post("/v1/run", response_model=CommandResponse)
    def run(req: RunRequest):
        return _response(
            pipeline.cmd_run(
                _config(req),
                partition_text=req.partition_text,
                frames=req.frames,
                trace=req.trace,
                timings=req.timings,
            )
        )

    @app.post("/v1/ablate", response_model=CommandResponse)
    def ablate(req: AblateRequest):
        return _response(pipeline.cmd_ablate(_config(req), timings=req.timings))

    @app.post("/v1/l1curve", response_model=CommandResponse)
    def l1curve(req: L1CurveRequest):
        return _response(pipeline.cmd_l1curve(_config(req)))

    @app.post("/v1/compare", response_model=CommandResponse)
    def compare(req: CompareRequest):
        ref = base64.b64decode(req.reference_pdit)
        test = base64.b64decode(req.test_pdit)
        return _response(pipeline.cmd_compare(ref, test, peak=req.peak))

    return app


app = create_app()
