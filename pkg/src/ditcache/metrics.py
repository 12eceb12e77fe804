"""Quality and efficiency measurement for denoising runs.

PSNR and SSIM are computed on final latents (there is no decoder at this
scale), so reported numbers are latent-space fidelity, not pixel fidelity.
SSIM uses uniform 8x8 windows with stride 1 and population moments instead
of the usual Gaussian weighting; that trades convention for exact
reproducibility and a simple independent oracle.

The FLOP model counts a multiply-accumulate as 2 operations and covers the
linear maps only (QKV/output projections, attention scores and weighted
values, the MLP, and the per-step embed/unembed projections). Softmax,
layer-norm and bias costs are excluded; they are under 1% of the total.
Per step the model costs

    L * (24*N*C^2 + 4*N^2*C) + 4*N*C^2

so a full run is S times that. All counts are exact integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .model import DiTModel, RunStats

SSIM_WINDOW = 8

__all__ = [
    "mean_l1",
    "psnr",
    "ssim",
    "flops_per_block",
    "flops_embed_unembed",
    "flops_full_run",
    "RunArtifacts",
    "RunReport",
    "compare_runs",
    "report_to_json",
]


def mean_l1(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """10*log10(peak^2 / MSE); +inf when the inputs are identical."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _planes(a: np.ndarray) -> np.ndarray:
    """View any latent-like array as a stack of 2-D planes."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None, :, :]
    if a.ndim >= 3:
        return a.reshape(-1, a.shape[-2], a.shape[-1])
    raise ValueError("ssim needs at least a 2-D array")


def ssim(a: np.ndarray, b: np.ndarray, peak: float, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over uniform windows of every 2-D plane.

    Stabilizers C1 = (0.01*peak)^2 and C2 = (0.03*peak)^2; identical inputs
    give exactly 1.0, and values stay within [-1, 1].
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    pa, pb = _planes(a), _planes(b)
    h, w = pa.shape[-2], pa.shape[-1]
    if h < window or w < window:
        raise ValueError(f"frame {h}x{w} smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    values = []
    for plane_a, plane_b in zip(pa, pb):
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                x = plane_a[i : i + window, j : j + window]
                y = plane_b[i : i + window, j : j + window]
                mx = float(np.mean(x))
                my = float(np.mean(y))
                vx = float(np.mean((x - mx) ** 2))
                vy = float(np.mean((y - my) ** 2))
                cxy = float(np.mean((x - mx) * (y - my)))
                values.append(
                    ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# FLOP model
# ---------------------------------------------------------------------------


def flops_per_block(n: int, c: int) -> int:
    """2*(4*N*C^2) projections + 2*(2*N^2*C) attention + 2*(8*N*C^2) MLP."""
    return 8 * n * c * c + 4 * n * n * c + 16 * n * c * c


def flops_embed_unembed(n: int, c: int) -> int:
    """One input and one output projection per step: 2 * 2*N*C^2."""
    return 4 * n * c * c


def flops_full_run(model: DiTModel, steps: int) -> int:
    n, c = model.num_tokens, model.channels
    return steps * (model.num_blocks * flops_per_block(n, c) + flops_embed_unembed(n, c))


def flops_from_stats(model: DiTModel, stats: RunStats) -> tuple[int, int]:
    """(executed, skipped) FLOPs implied by a run's block-evaluation ledger."""
    n, c = model.num_tokens, model.channels
    executed = stats.steps * flops_embed_unembed(n, c) + stats.blocks_executed * flops_per_block(n, c)
    skipped = stats.blocks_skipped * flops_per_block(n, c)
    return executed, skipped


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    """What one denoising run leaves behind, for comparison purposes."""

    label: str
    final_latent: np.ndarray
    stats: RunStats
    model: DiTModel


@dataclass
class RunReport:
    reference: str
    psnr: float
    ssim: float
    mean_l1: float
    flops_executed: int
    flops_skipped: int
    flops_total: int
    speedup_flops: float
    blocks_executed: int
    blocks_skipped: int
    skipped_fraction: float
    wall_ms: float | None
    speedup_wall: float | None


def compare_runs(
    test: RunArtifacts,
    reference: RunArtifacts,
    peak: float | None = None,
    with_timings: bool = False,
) -> RunReport:
    """Quality and efficiency of `test` against `reference`.

    Both runs must share model parameters, schedule length and seeds
    (checked via RunStats provenance); anything else is a refusal, not a
    silent apples-to-oranges comparison. Wall-clock numbers are only filled
    in when `with_timings` is set, because they are inherently
    nondeterministic.
    """
    if test.stats.provenance != reference.stats.provenance:
        raise ContractViolation(
            "refusing to compare runs with mismatched provenance: "
            f"{test.stats.provenance} vs {reference.stats.provenance}"
        )
    if test.stats.steps != reference.stats.steps:
        raise ContractViolation("runs have different schedule lengths")
    if peak is None:
        ref = reference.final_latent
        spread = float(ref.max() - ref.min())
        peak = spread if spread > 0 else 1.0
    executed, skipped = flops_from_stats(test.model, test.stats)
    total = flops_full_run(test.model, test.stats.steps)
    wall_ms = speedup_wall = None
    if with_timings:
        wall_ms = test.stats.wall_s * 1000.0
        if test.stats.wall_s > 0:
            speedup_wall = reference.stats.wall_s / test.stats.wall_s
    evals = test.stats.blocks_executed + test.stats.blocks_skipped
    return RunReport(
        reference=reference.label,
        psnr=psnr(test.final_latent, reference.final_latent, peak),
        ssim=ssim(test.final_latent, reference.final_latent, peak),
        mean_l1=mean_l1(test.final_latent, reference.final_latent),
        flops_executed=executed,
        flops_skipped=skipped,
        flops_total=total,
        speedup_flops=total / executed,
        blocks_executed=test.stats.blocks_executed,
        blocks_skipped=test.stats.blocks_skipped,
        skipped_fraction=test.stats.blocks_skipped / evals if evals else 0.0,
        wall_ms=wall_ms,
        speedup_wall=speedup_wall,
    )


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def report_to_dict(report: RunReport) -> dict:
    """Fixed key order, with the PSNR infinity sentinel encoded as "inf"."""
    keys = [
        "reference",
        "psnr",
        "ssim",
        "mean_l1",
        "flops_executed",
        "flops_skipped",
        "flops_total",
        "speedup_flops",
        "blocks_executed",
        "blocks_skipped",
        "skipped_fraction",
        "wall_ms",
        "speedup_wall",
    ]
    return {k: _jsonable(getattr(report, k)) for k in keys}


def report_to_json(report: RunReport) -> str:
    return json.dumps(report_to_dict(report), indent=2) + "\n"
