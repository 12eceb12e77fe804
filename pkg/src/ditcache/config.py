"""Experiment configuration: pydantic models plus the line-oriented file format.

Config files are UTF-8 `key = value` lines with `#` comments and dotted
section keys, e.g.

    model.seed = 42
    schedule.kind = adaptive
    schedule.t_max = 12

Every field has a default; unknown sections or keys are rejected with a
ConfigError rather than ignored.
"""

from __future__ import annotations

from typing import Annotated

from pydantic import BaseModel, BeforeValidator, ConfigDict, ValidationError

from .errors import ConfigError


def _as_list(v):
    # a one-element config list parses as a bare scalar; wrap it back up
    if v is None or isinstance(v, list):
        return v
    return [v]


IntList = Annotated[list[int], BeforeValidator(_as_list)]
StrList = Annotated[list[str], BeforeValidator(_as_list)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    seed: int = 42
    blocks: int = 8
    channels: int = 16
    frames: int = 2
    height: int = 8
    width: int = 8
    # Shaped block lists; None means the default interleaved layout.
    foreground_shaped: IntList | None = None
    background_shaped: IntList | None = None
    shaping_strength: float = 4.0
    shaping_anchor: float = 3.0
    signal_feedback: float = 4.0


class RunSection(_Section):
    steps: int = 20
    beta_start: float = 0.02
    beta_end: float = 0.15
    noise_seed: int = 1234  # seeds the z mixed into x_T


class ScheduleSection(_Section):
    kind: str = "stepwise"
    intervals: IntList = [12, 9, 6, 3]
    warmup: int = 2
    t: int = 3  # step_average
    t_max: int = 12  # adaptive
    t_min: int = 3


class PatternSection(_Section):
    kind: str = "background_only"
    boundary: int | None = None  # split; default: midpoint of post-warmup steps
    segment: int = 1  # alternate


class ProfileSection(_Section):
    tau: float = 0.5
    high_percentile: float = 90.0
    step_start: int = 0
    step_stop: int | None = None  # None: profile through the last step
    orientation: str = "column"
    mask_dir: str | None = None  # external per-frame PGM masks


class SceneSection(_Section):
    background: float = 0.0
    noise: float = 0.25
    magnitude: float = 15.0
    rect: IntList = [1, 1, 3, 2]
    motion: IntList = [1, 0]
    seed: int = 7


class CacheSection(_Section):
    accumulated: bool = False


class PartitionSection(_Section):
    # Explicit partition override; both lists must be given together.
    foreground: IntList | None = None
    background: IntList | None = None


class AblateSection(_Section):
    patterns: StrList = ["background_only", "foreground_only", "split", "alternate"]
    schedules: StrList = ["stepwise", "step_inverse", "step_average", "adaptive"]


class ExperimentConfig(_Section):
    model: ModelSection = ModelSection()
    run: RunSection = RunSection()
    schedule: ScheduleSection = ScheduleSection()
    pattern: PatternSection = PatternSection()
    profile: ProfileSection = ProfileSection()
    scene: SceneSection = SceneSection()
    cache: CacheSection = CacheSection()
    partition: PartitionSection = PartitionSection()
    ablate: AblateSection = AblateSection()


def _parse_scalar(token: str):
    token = token.strip()
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return [_parse_scalar(part) for part in raw.split(",")]
    return _parse_scalar(raw)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse config-file content into a validated ExperimentConfig."""
    tree: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        parts = [p.strip() for p in key.strip().split(".")]
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"line {lineno}: keys must look like 'section.name', got {key.strip()!r}")
        section, name = parts
        tree.setdefault(section, {})[name] = _parse_value(raw)
    return validate_config(tree)


def validate_config(tree: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        detail = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {detail}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)
