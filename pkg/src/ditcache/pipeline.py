"""End-to-end experiment driver.

Every command here is a pure function from configuration to a dict of
artifact bytes, so reruns are byte-identical and the same code path backs
the CLI, the HTTP service and the tests. Wall-clock timings are only
embedded in artifacts when explicitly requested, precisely because they
would break that reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cache import CacheEngine, ReusePattern, StepSchedule
from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import (
    RunArtifacts,
    compare_runs,
    mean_l1,
    psnr,
    report_to_dict,
    report_to_json,
    ssim,
)
from .model import (
    DiTModel,
    NoiseSchedule,
    ShapingSpec,
    TraceFlags,
    default_shaping,
    denoise_loop,
    forward_diffuse,
    init_model,
    linear_schedule,
)
from .profiler import (
    BlockPartition,
    BlockProfile,
    ProfileBuilder,
    export_heatmap,
    l1_step_distance,
    load_mask_frames,
    partition_blocks,
    segment_foreground,
)
from .scenes import SceneSpec, generate_scene
from .serial import pgm_to_bytes, tensor_from_bytes, tensor_to_bytes

# ---------------------------------------------------------------------------
# Construction from config
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> DiTModel:
    m = cfg.model
    grid = (m.frames, m.height, m.width)
    if m.foreground_shaped is None and m.background_shaped is None:
        layout = default_shaping(m.blocks)
        fg, bg = layout.foreground_blocks, layout.background_blocks
    else:
        fg = tuple(m.foreground_shaped or ())
        bg = tuple(m.background_shaped or ())
    shaping = ShapingSpec(
        foreground_blocks=fg,
        background_blocks=bg,
        strength=m.shaping_strength,
        anchor=m.shaping_anchor,
        signal_feedback=m.signal_feedback,
    )
    try:
        return init_model(m.seed, m.blocks, m.channels, grid, shaping=shaping)
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from exc


def build_noise_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    try:
        return linear_schedule(cfg.run.steps, cfg.run.beta_start, cfg.run.beta_end)
    except ValueError as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc


def build_step_schedule(cfg: ExperimentConfig) -> StepSchedule:
    s = cfg.schedule
    total, warmup = cfg.run.steps, s.warmup
    try:
        if s.kind == "stepwise":
            return StepSchedule.stepwise(total, s.intervals, warmup=warmup)
        if s.kind == "step_inverse":
            return StepSchedule.step_inverse(total, s.intervals, warmup=warmup)
        if s.kind == "step_average":
            return StepSchedule.step_average(total, s.t, warmup=warmup)
        if s.kind == "adaptive":
            return StepSchedule.adaptive(total, s.t_max, s.t_min, warmup=warmup)
    except ValueError as exc:
        raise ConfigError(f"invalid schedule configuration: {exc}") from exc
    raise ConfigError(f"unknown schedule kind {s.kind!r}")


def build_pattern(cfg: ExperimentConfig, schedule: StepSchedule) -> ReusePattern:
    p = cfg.pattern
    try:
        if p.kind == "split":
            boundary = p.boundary
            if boundary is None:
                boundary = schedule.warmup + max(1, (schedule.total - schedule.warmup) // 2)
            return ReusePattern(kind="split", boundary=boundary)
        if p.kind == "alternate":
            return ReusePattern(kind="alternate", segment=p.segment)
        return ReusePattern(kind=p.kind)
    except ValueError as exc:
        raise ConfigError(f"invalid pattern configuration: {exc}") from exc


def build_scene_spec(cfg: ExperimentConfig) -> SceneSpec:
    s = cfg.scene
    if len(s.rect) != 4:
        raise ConfigError("scene.rect needs exactly four values: x,y,w,h")
    if len(s.motion) != 2:
        raise ConfigError("scene.motion needs exactly two values: dx,dy")
    return SceneSpec(
        background_level=s.background,
        background_noise=s.noise,
        magnitude=s.magnitude,
        rect=tuple(s.rect),
        motion=tuple(s.motion),
        seed=s.seed,
    )


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "model_seed": cfg.model.seed,
        "blocks": cfg.model.blocks,
        "channels": cfg.model.channels,
        "grid": [cfg.model.frames, cfg.model.height, cfg.model.width],
        "steps": cfg.run.steps,
        "noise_seed": cfg.run.noise_seed,
        "scene_seed": cfg.scene.seed,
    }


def initial_latent(cfg: ExperimentConfig, model: DiTModel, sched: NoiseSchedule):
    """Scene latent, its truth mask and the fully-diffused starting point."""
    spec = build_scene_spec(cfg)
    try:
        x0, truth = generate_scene(spec, model.grid, model.channels)
    except ValueError as exc:
        raise ConfigError(f"invalid scene configuration: {exc}") from exc
    rng = np.random.default_rng([cfg.run.noise_seed & 0xFFFFFFFF, model.num_tokens])
    z = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, sched.num_steps, z, sched)
    return x0, truth, x_t


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _run(cfg, model, sched, engine=None, flags=None, label="run"):
    _, _, x_t = initial_latent(cfg, model, sched)
    final, trace, stats = denoise_loop(model, x_t, sched, engine=engine, flags=flags)
    stats.provenance = provenance(cfg)
    return RunArtifacts(label=label, final_latent=final, stats=stats, model=model), trace


def reference_run(cfg: ExperimentConfig, model=None, flags=None):
    model = model or build_model(cfg)
    sched = build_noise_schedule(cfg)
    return _run(cfg, model, sched, flags=flags, label="reference")


def cached_run(cfg: ExperimentConfig, partition: BlockPartition, model=None, flags=None):
    model = model or build_model(cfg)
    sched = build_noise_schedule(cfg)
    step_schedule = build_step_schedule(cfg)
    pattern = build_pattern(cfg, step_schedule)
    engine = CacheEngine(
        partition, step_schedule, pattern, accumulated=cfg.cache.accumulated
    )
    artifacts, trace = _run(cfg, model, sched, engine=engine, flags=flags, label="cached")
    return artifacts, trace, engine


def profile_model(cfg: ExperimentConfig, model=None) -> tuple[BlockProfile, BlockPartition]:
    """Uncached traced run -> per-step masks -> r_attn matrix -> partition."""
    model = model or build_model(cfg)
    _, trace = reference_run(cfg, model=model, flags=TraceFlags(attention=True))
    p = cfg.profile
    steps = cfg.run.steps
    builder = ProfileBuilder(
        num_blocks=model.num_blocks,
        num_steps=steps,
        high_percentile=p.high_percentile,
        tau=p.tau,
        orientation=p.orientation,
    )
    external_mask = None
    if p.mask_dir is not None:
        frames = model.grid[0]
        paths = [Path(p.mask_dir) / f"mask_frame_{f:03d}.pgm" for f in range(frames)]
        external_mask = load_mask_frames(paths, model.grid)
    for s in range(steps):
        mask = external_mask
        if mask is None:
            mask = segment_foreground(trace.noise_preds[s])
            if mask.degenerate:
                continue  # undefined r_attn for the whole step
        entry = trace.entries[s]
        for b in range(model.num_blocks):
            builder.add(b, s, entry.attention[b], mask)
    profile = builder.build()
    stop = steps if p.step_stop is None else p.step_stop
    if not 0 <= p.step_start < stop <= steps:
        raise ConfigError(f"profile step range [{p.step_start}, {stop}) outside [0, {steps})")
    partition = partition_blocks(profile, tau=p.tau, step_range=(p.step_start, stop))
    return profile, partition


# ---------------------------------------------------------------------------
# Partition file format
# ---------------------------------------------------------------------------


def partition_to_text(partition: BlockPartition) -> str:
    fg = ",".join(str(i) for i in partition.foreground)
    bg = ",".join(str(i) for i in partition.background)
    return f"F: {fg}\nB: {bg}\n"


def partition_from_text(text: str) -> BlockPartition:
    sides: dict[str, tuple[int, ...]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"bad partition line {line!r}")
        side, _, values = line.partition(":")
        side = side.strip().upper()
        if side not in ("F", "B"):
            raise ConfigError(f"partition side must be F or B, got {side!r}")
        items = tuple(int(v) for v in values.split(",") if v.strip() != "")
        sides[side] = items
    if set(sides) != {"F", "B"}:
        raise ConfigError("partition file needs exactly one F: line and one B: line")
    try:
        return BlockPartition(foreground=sides["F"], background=sides["B"])
    except ValueError as exc:
        raise ConfigError(f"invalid partition file: {exc}") from exc


def resolve_partition(
    cfg: ExperimentConfig, partition_text: str | None = None, model=None
) -> BlockPartition:
    """Partition file beats explicit config lists beats inline profiling."""
    if partition_text is not None:
        return partition_from_text(partition_text)
    if cfg.partition.foreground is not None or cfg.partition.background is not None:
        try:
            return BlockPartition(
                foreground=tuple(cfg.partition.foreground or ()),
                background=tuple(cfg.partition.background or ()),
            )
        except ValueError as exc:
            raise ConfigError(f"invalid partition configuration: {exc}") from exc
    _, partition = profile_model(cfg, model=model)
    return partition


# ---------------------------------------------------------------------------
# Artifact rendering
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if np.isinf(v):
            return "inf"
        return format(v, ".17g")
    return str(v)


def heatmap_csv(profile: BlockProfile) -> str:
    lines = ["block,step,r_attn"]
    for block, step, value in export_heatmap(profile):
        lines.append(f"{block},{step},{_fmt(value)}")
    return "\n".join(lines) + "\n"


def series_csv(name: str, values) -> str:
    lines = [f"step,{name}"]
    for s, v in enumerate(values):
        lines.append(f"{s},{_fmt(float(v) if isinstance(v, (float, np.floating)) else v)}")
    return "\n".join(lines) + "\n"


def render_frame(latent: np.ndarray, f: int) -> np.ndarray:
    """Channel-mean image of one frame, min-max scaled to uint8."""
    img = latent[:, f].mean(axis=0)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass
class CommandResult:
    """Structured summary plus the files the command would write."""

    summary: dict
    artifacts: dict[str, bytes]


def cmd_profile(cfg: ExperimentConfig) -> CommandResult:
    model = build_model(cfg)
    profile, partition = profile_model(cfg, model=model)
    artifacts = {
        "heatmap.csv": heatmap_csv(profile).encode("utf-8"),
        "partition.txt": partition_to_text(partition).encode("utf-8"),
    }
    summary = {
        "foreground": list(partition.foreground),
        "background": list(partition.background),
        "defined_entries": int(np.sum(~np.isnan(profile.r_attn))),
    }
    return CommandResult(summary=summary, artifacts=artifacts)


def cmd_run(
    cfg: ExperimentConfig,
    partition_text: str | None = None,
    frames: bool = False,
    trace: bool = False,
    timings: bool = False,
) -> CommandResult:
    model = build_model(cfg)
    partition = resolve_partition(cfg, partition_text, model=model)
    ref, _ = reference_run(cfg, model=model)
    flags = TraceFlags(latents=frames)
    test, test_trace, engine = cached_run(cfg, partition, model=model, flags=flags)
    report = compare_runs(test, ref, with_timings=timings)

    artifacts: dict[str, bytes] = {
        "report.json": report_to_json(report).encode("utf-8"),
        "partition.txt": partition_to_text(partition).encode("utf-8"),
        "l1.csv": series_csv("l1", l1_step_distance(test_trace.noise_preds)).encode("utf-8"),
        "executed.csv": series_csv("executed", test.stats.per_step_executed).encode("utf-8"),
        "latent_ref.pdit": tensor_to_bytes(ref.final_latent),
        "latent_test.pdit": tensor_to_bytes(test.final_latent),
    }
    if trace:
        cache_dump = json.dumps(engine.dump_state(), indent=2) + "\n"
        artifacts["cache_state.json"] = cache_dump.encode("utf-8")
        for s, pred in enumerate(test_trace.noise_preds):
            artifacts[f"trace/noise_{s:04d}.pdit"] = tensor_to_bytes(pred)
    if frames:
        n_frames = model.grid[0]
        for s, latent in enumerate(test_trace.latents):
            for f in range(n_frames):
                name = f"frames/step_{s:04d}_frame_{f:03d}.pgm"
                artifacts[name] = pgm_to_bytes(render_frame(latent, f))
    return CommandResult(summary=report_to_dict(report), artifacts=artifacts)


ABLATION_COLUMNS = "pattern,schedule,psnr,ssim,mean_l1,speedup_flops,wall_ms,error"


def cmd_ablate(cfg: ExperimentConfig, timings: bool = False) -> CommandResult:
    model = build_model(cfg)
    partition = resolve_partition(cfg, model=model)
    ref, _ = reference_run(cfg, model=model)

    rows: list[dict] = []
    ref_report = compare_runs(ref, ref, with_timings=timings)
    rows.append({"pattern": "none", "schedule": "none", "report": ref_report, "error": ""})

    for pattern_kind in cfg.ablate.patterns:
        for schedule_kind in cfg.ablate.schedules:
            cell_cfg = cfg.model_copy(deep=True)
            cell_cfg.pattern.kind = pattern_kind
            cell_cfg.schedule.kind = schedule_kind
            if schedule_kind == "step_inverse":
                ivals = cell_cfg.schedule.intervals
                if all(a >= b for a, b in zip(ivals, ivals[1:])):
                    # the grid contrasts decreasing vs increasing intervals
                    # over the same multiset, so mirror the stepwise list
                    cell_cfg.schedule.intervals = list(reversed(ivals))
            row = {"pattern": pattern_kind, "schedule": schedule_kind, "report": None, "error": ""}
            try:
                test, _, _ = cached_run(cell_cfg, partition, model=model)
                row["report"] = compare_runs(test, ref, with_timings=timings)
            except Exception as exc:  # record the failure, keep the grid going
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)

    lines = [ABLATION_COLUMNS]
    for row in rows:
        r = row["report"]
        fields = [row["pattern"], row["schedule"]]
        if r is None:
            fields += ["", "", "", "", ""]
        else:
            fields += [_fmt(r.psnr), _fmt(r.ssim), _fmt(r.mean_l1), _fmt(r.speedup_flops), _fmt(r.wall_ms)]
        fields.append(row["error"])
        lines.append(",".join(fields))
    csv_text = "\n".join(lines) + "\n"

    summary = {
        "rows": [
            {
                "pattern": row["pattern"],
                "schedule": row["schedule"],
                "report": None if row["report"] is None else report_to_dict(row["report"]),
                "error": row["error"],
            }
            for row in rows
        ]
    }
    return CommandResult(summary=summary, artifacts={"ablation.csv": csv_text.encode("utf-8")})


def cmd_l1curve(cfg: ExperimentConfig) -> CommandResult:
    _, trace = reference_run(cfg)
    values = l1_step_distance(trace.noise_preds)
    return CommandResult(
        summary={"l1": [float(v) for v in values]},
        artifacts={"l1.csv": series_csv("l1", values).encode("utf-8")},
    )


def cmd_compare(ref_bytes: bytes, test_bytes: bytes, peak: float | None = None) -> CommandResult:
    """Metrics-only comparison of two PDIT latent dumps."""
    ref = tensor_from_bytes(ref_bytes)
    test = tensor_from_bytes(test_bytes)
    if peak is None:
        spread = float(ref.max() - ref.min())
        peak = spread if spread > 0 else 1.0
    result = {
        "psnr": psnr(test, ref, peak),
        "ssim": ssim(test, ref, peak),
        "mean_l1": mean_l1(test, ref),
        "peak": peak,
    }
    jsonable = {k: ("inf" if isinstance(v, float) and np.isinf(v) else v) for k, v in result.items()}
    text = json.dumps(jsonable, indent=2) + "\n"
    return CommandResult(summary=jsonable, artifacts={"report.json": text.encode("utf-8")})


def write_artifacts(out_dir, artifacts: dict[str, bytes]) -> list[str]:
    """Write artifact bytes under out_dir, creating directories as needed."""
    out = Path(out_dir)
    written = []
    for rel, data in artifacts.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        written.append(str(path))
    return written
