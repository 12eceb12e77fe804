"""Deterministic toy diffusion transformer.

A stack of pre-norm residual blocks (single-head attention + 4x MLP with
tanh-approximated GELU) over a token grid of (frames, height, width), with
plain linear input/output projections and a deterministic implicit sampler
for the reverse process. Everything is a pure function of the seeds, so two
runs with the same arguments are bitwise identical.

Weight shaping: a freshly seeded random model has no reason to attend to any
particular region, so `init_model` can bias designated blocks toward or away
from a scene signal direction. A shaped block gets:

  * an offset on its first layer-norm (`anchor`), giving every token's
    queries a shared positive component along a per-block beacon direction;
  * keys built mostly from the token's alignment with the hidden-space image
    of the scene signal channel (positively for foreground-leaning blocks,
    negatively for background-leaning ones).

Attention logits then factor as (shared positive query term) x (per-token
signal alignment), so foreground-leaning blocks concentrate attention mass
on high-signal tokens wherever they sit in the grid, and background-leaning
blocks on everything else. Unshaped blocks keep plain random projections.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError
from .tensor import as_f64, layer_norm, matmul, softmax_rows

ROLE_IDS = {
    "w_in": 0,
    "w_out": 1,
    "w_q": 2,
    "w_k": 3,
    "w_v": 4,
    "w_o": 5,
    "w_up": 6,
    "b_up": 7,
    "w_down": 8,
    "b_down": 9,
    "beacon": 10,
    "anchor": 11,
}

_SEED_MASK = (1 << 64) - 1


def _rng(seed: int, block_index: int, role: str) -> np.random.Generator:
    # Splittable: every (seed, block, role) triple owns an independent stream.
    return np.random.default_rng([seed & _SEED_MASK, block_index + 1, ROLE_IDS[role]])


# ---------------------------------------------------------------------------
# Noise schedule and forward diffusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise intensities and their cumulative products.

    `alphas[t-1]` is the intensity of step t = 1..T; `alpha_bars` has length
    T+1 with `alpha_bars[0] == 1.0` (clean data) and must be strictly
    decreasing.
    """

    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_alphas(cls, alphas) -> "NoiseSchedule":
        alphas = as_f64(alphas)
        if alphas.ndim != 1 or alphas.size < 1:
            raise ValueError("schedule needs at least one step")
        if not np.all((alphas > 0.0) & (alphas <= 1.0)):
            raise ValueError("every alpha must lie in (0, 1]")
        bars = np.concatenate([[1.0], np.cumprod(alphas)])
        if not np.all(np.diff(bars) < 0.0):
            raise ValueError("cumulative alpha products must be strictly decreasing")
        return cls(alphas=alphas, alpha_bars=bars)

    @property
    def num_steps(self) -> int:
        return int(self.alphas.size)


def linear_schedule(steps: int, beta_start: float = 0.02, beta_end: float = 0.15) -> NoiseSchedule:
    """Linear-beta schedule scaled for short desk-scale runs."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    betas = np.linspace(beta_start, beta_end, steps)
    return NoiseSchedule.from_alphas(1.0 - betas)


def mix_noise(x0: np.ndarray, z: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Closed-form forward diffusion: sqrt(ab)*x0 + sqrt(1-ab)*z."""
    if x0.shape != z.shape:
        raise ValueError("x0 and z shapes differ")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in [0, 1]")
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * z


def forward_diffuse(x0: np.ndarray, t: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"step t={t} outside [1, {sched.num_steps}]")
    return mix_noise(x0, z, float(sched.alpha_bars[t]))


# ---------------------------------------------------------------------------
# Model structure
# ---------------------------------------------------------------------------


@dataclass
class DiTBlock:
    index: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class DiTModel:
    seed: int
    channels: int
    grid: tuple[int, int, int]  # (frames, height, width)
    w_in: np.ndarray
    w_out: np.ndarray
    blocks: list[DiTBlock]

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def num_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "blocks": self.num_blocks,
            "channels": self.channels,
            "grid": list(self.grid),
        }


@dataclass(frozen=True)
class ShapingSpec:
    """Which blocks lean foreground/background and how hard.

    `strength` scales the signal-aligned key component, `anchor` the shared
    layer-norm offset that keeps all queries pointing the same way. Blocks in
    neither list stay unshaped (plain random attention).

    `signal_feedback` adds a cross-channel term to the output projection
    (signal channel feeding a second channel), which makes the sampler
    rotate foreground content across denoising steps. Without it the
    trajectory re-scales every component uniformly, token directions never
    move, and cached deviations would be equally stale everywhere; with it
    the foreground genuinely evolves while the background stays put.
    """

    foreground_blocks: tuple[int, ...]
    background_blocks: tuple[int, ...]
    strength: float = 4.0
    anchor: float = 3.0
    signal_channel: int = 0
    signal_feedback: float = 4.0


def default_shaping(num_blocks: int) -> ShapingSpec:
    # Interleave so the background list contains genuine consecutive runs.
    fg = tuple(i for i in range(num_blocks) if i % 4 in (0, 3))
    bg = tuple(i for i in range(num_blocks) if i % 4 in (1, 2))
    return ShapingSpec(foreground_blocks=fg, background_blocks=bg)


def init_model(
    seed: int,
    num_blocks: int,
    channels: int,
    grid: tuple[int, int, int],
    shaping: ShapingSpec | None = None,
) -> DiTModel:
    """Build a toy model from a splittable RNG keyed by (seed, block, role)."""
    if num_blocks < 2:
        raise ValueError("need at least 2 blocks")
    if channels < 2:
        raise ValueError("need at least 2 channels")
    frames, height, width = grid
    if min(frames, height, width) < 1 or frames * height * width < 4:
        raise ValueError("token grid must contain at least 4 tokens")
    if shaping is None:
        shaping = default_shaping(num_blocks)
    for idx in (*shaping.foreground_blocks, *shaping.background_blocks):
        if not 0 <= idx < num_blocks:
            raise ValueError(f"shaped block index {idx} out of range")
    if set(shaping.foreground_blocks) & set(shaping.background_blocks):
        raise ValueError("a block cannot lean both foreground and background")
    if not 0 <= shaping.signal_channel < channels:
        raise ValueError("signal channel out of range")

    c = channels
    sc = 1.0 / np.sqrt(c)
    # Identity-plus-noise projections keep the scene's signal channel
    # recognizable in the noise predictions; fully random maps can bury it
    # in an unlucky direction and starve the profiler of usable masks.
    w_in = np.eye(c) + _rng(seed, -1, "w_in").standard_normal((c, c)) * (0.15 * sc)
    w_out = 0.15 * (np.eye(c) + _rng(seed, -1, "w_out").standard_normal((c, c)) * (0.15 * sc))
    rotate_channel = (shaping.signal_channel + 2) % c
    w_out[shaping.signal_channel, rotate_channel] += 0.15 * shaping.signal_feedback

    # Hidden-space image of the scene signal channel, centered the way the
    # block's first layer norm will see it.
    d = w_in[shaping.signal_channel, :].copy()
    d -= d.mean()
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        d = np.zeros(c)
        d[0], d[-1] = 1.0, -1.0
        norm = np.linalg.norm(d)
    d /= norm

    blocks = []
    for i in range(num_blocks):
        w_q = _rng(seed, i, "w_q").standard_normal((c, c)) * sc
        w_k = _rng(seed, i, "w_k").standard_normal((c, c)) * sc
        ln1_beta = np.zeros(c)

        if i in shaping.foreground_blocks or i in shaping.background_blocks:
            sign = 1.0 if i in shaping.foreground_blocks else -1.0
            beacon = _rng(seed, i, "beacon").standard_normal(c)
            beacon /= np.linalg.norm(beacon)
            anchor_dir = _rng(seed, i, "anchor").standard_normal(c)
            anchor_dir /= np.linalg.norm(anchor_dir)
            w_q = w_q * 0.05 + np.outer(anchor_dir, beacon)
            w_k = w_k * 0.05 + (sign * shaping.strength) * np.outer(d, beacon)
            ln1_beta = shaping.anchor * anchor_dir

        blocks.append(
            DiTBlock(
                index=i,
                w_q=w_q,
                w_k=w_k,
                w_v=_rng(seed, i, "w_v").standard_normal((c, c)) * (0.25 * sc),
                w_o=_rng(seed, i, "w_o").standard_normal((c, c)) * (0.25 * sc),
                w_up=_rng(seed, i, "w_up").standard_normal((c, 4 * c)) * (0.25 * sc),
                b_up=_rng(seed, i, "b_up").standard_normal(4 * c) * 0.02,
                w_down=_rng(seed, i, "w_down").standard_normal((4 * c, c)) * (0.25 / np.sqrt(4 * c)),
                b_down=_rng(seed, i, "b_down").standard_normal(c) * 0.02,
                ln1_gamma=np.ones(c),
                ln1_beta=ln1_beta,
                ln2_gamma=np.ones(c),
                ln2_beta=np.zeros(c),
            )
        )
    return DiTModel(seed=seed, channels=c, grid=(frames, height, width), w_in=w_in, w_out=w_out, blocks=blocks)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def latent_to_tokens(x: np.ndarray) -> np.ndarray:
    """(C, T, H, W) -> (N, C) with tokens ordered (t, y, x) row-major."""
    c = x.shape[0]
    return np.ascontiguousarray(np.moveaxis(x, 0, -1).reshape(-1, c))


def tokens_to_latent(tokens: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    t, h, w = grid
    c = tokens.shape[1]
    return np.ascontiguousarray(np.moveaxis(tokens.reshape(t, h, w, c), -1, 0))


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exact erf would drag in scipy for no benefit here
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def block_attention(block: DiTBlock, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention over already-normalized tokens.

    Returns (A, out) where A = softmax(Q K^T / sqrt(C)) row-wise and
    out = A V W_o.
    """
    c = x.shape[1]
    q = matmul(x, block.w_q)
    k = matmul(x, block.w_k)
    v = matmul(x, block.w_v)
    a = softmax_rows(matmul(q, k.T) / np.sqrt(c))
    return a, matmul(matmul(a, v), block.w_o)


def block_forward(
    block: DiTBlock, h_in: np.ndarray, want_attention: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Pre-norm residual block: h + attn(LN(h)), then + MLP(LN(h))."""
    a, attn_out = block_attention(block, layer_norm(h_in, block.ln1_gamma, block.ln1_beta))
    h = h_in + attn_out
    normed = layer_norm(h, block.ln2_gamma, block.ln2_beta)
    mlp = matmul(_gelu(matmul(normed, block.w_up) + block.b_up), block.w_down) + block.b_down
    return h + mlp, (a if want_attention else None)


@dataclass(frozen=True)
class TraceFlags:
    attention: bool = False
    boundaries: bool = False
    latents: bool = False  # record the evolving latent after each step

    @property
    def any(self) -> bool:
        return self.attention or self.boundaries


@dataclass
class StepTraceEntry:
    """Per-step trace; keys are block indices that actually executed."""

    attention: dict[int, np.ndarray] = field(default_factory=dict)
    h_in: dict[int, np.ndarray] = field(default_factory=dict)
    h_out: dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, flags: TraceFlags, index: int, h_in, h_out, a) -> None:
        if flags.attention and a is not None:
            self.attention[index] = a
        if flags.boundaries:
            self.h_in[index] = h_in
            self.h_out[index] = h_out


@dataclass
class StepTrace:
    noise_preds: list[np.ndarray] = field(default_factory=list)
    entries: list[StepTraceEntry | None] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)


@dataclass
class RunStats:
    steps: int
    blocks_executed: int
    blocks_skipped: int
    per_step_executed: list[int]
    wall_s: float
    provenance: dict | None = None


def model_forward(
    model: DiTModel,
    x: np.ndarray,
    step: int,
    engine=None,
    flags: TraceFlags | None = None,
) -> tuple[np.ndarray, StepTraceEntry | None]:
    """One denoiser evaluation; `engine`, when given, owns the block loop."""
    flags = flags or TraceFlags()
    entry = StepTraceEntry() if flags.any else None
    tokens = latent_to_tokens(as_f64(x))
    h = matmul(tokens, model.w_in)
    if engine is not None:
        h = engine.apply_step(model.blocks, h, step, flags=flags, sink=entry)
    else:
        for block in model.blocks:
            h_prev = h
            h, a = block_forward(block, h, want_attention=flags.attention)
            if not np.isfinite(h).all():
                raise NonFiniteError(
                    f"non-finite hidden state at step {step}, block {block.index}",
                    step=step,
                    block=block.index,
                )
            if entry is not None:
                entry.record(flags, block.index, h_prev, h, a)
    eps = matmul(h, model.w_out)
    return tokens_to_latent(eps, model.grid), entry


def denoise_loop(
    model: DiTModel,
    x_t: np.ndarray,
    sched: NoiseSchedule,
    engine=None,
    flags: TraceFlags | None = None,
) -> tuple[np.ndarray, StepTrace, RunStats]:
    """Deterministic implicit sampler from x_T down to x_0.

    Steps are indexed forward s = 0..S-1 in execution order; step s works on
    diffusion time t = S - s. The per-step mean update is

        x0_hat  = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
        x_{t-1} = sqrt(ab_{t-1}) * x0_hat + sqrt(1 - ab_{t-1}) * eps

    with zero sampling covariance, so the whole run is a pure function of
    (model, x_T, schedule, engine configuration).
    """
    steps = sched.num_steps
    trace = StepTrace()
    per_step_executed: list[int] = []
    x = as_f64(x_t)
    start = time.perf_counter()
    for s in range(steps):
        t = steps - s
        executed_before = engine.blocks_executed if engine is not None else 0
        eps, entry = model_forward(model, x, s, engine=engine, flags=flags)
        trace.noise_preds.append(eps)
        trace.entries.append(entry)
        ab_t = float(sched.alpha_bars[t])
        ab_prev = float(sched.alpha_bars[t - 1])
        x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
        if not np.isfinite(x).all():
            raise NonFiniteError(
                f"non-finite latent after sampler update at step {s}", step=s
            )
        if flags is not None and flags.latents:
            trace.latents.append(x)
        if engine is not None:
            per_step_executed.append(engine.blocks_executed - executed_before)
        else:
            per_step_executed.append(model.num_blocks)
    wall = time.perf_counter() - start

    executed = sum(per_step_executed)
    skipped = engine.blocks_skipped if engine is not None else 0
    stats = RunStats(
        steps=steps,
        blocks_executed=executed,
        blocks_skipped=skipped,
        per_step_executed=per_step_executed,
        wall_s=wall,
    )
    return x, trace, stats
