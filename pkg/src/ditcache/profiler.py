"""Attention profiling: which blocks look at the foreground?

Per step, the noise prediction is segmented into foreground/background
tokens (3-component PCA over channels, Otsu threshold on the leading
component, minority region wins). Per block and step, attention mass is
aggregated per token and the fraction of foreground tokens that are also
high-attention tokens gives that block's foreground focus. Averaging over
steps and thresholding against tau yields the foreground/background block
partition that the cache engine consumes.

Orientation note: aggregating a row-stochastic attention matrix along its
rows gives a constant 1/N for every token, so the informative default here
is the column mean (attention received by a token). The row mean stays
available behind the `orientation` switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .serial import read_pgm
from .tensor import matmul, top_eigvecs

DEFAULT_HIGH_PERCENTILE = 90.0
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint foreground/background block index lists covering 0..L-1."""

    foreground: tuple[int, ...]
    background: tuple[int, ...]

    def __post_init__(self):
        fg, bg = set(self.foreground), set(self.background)
        if fg & bg:
            raise ValueError("foreground and background overlap")
        union = fg | bg
        if union and union != set(range(max(union) + 1)):
            raise ValueError("partition must cover exactly 0..L-1")
        if list(self.foreground) != sorted(fg) or list(self.background) != sorted(bg):
            raise ValueError("partition lists must be sorted ascending")

    @property
    def num_blocks(self) -> int:
        return len(self.foreground) + len(self.background)


@dataclass
class ForegroundMask:
    """Per-token boolean mask laid out frame-major over (frames, h, w)."""

    bits: np.ndarray
    grid: tuple[int, int, int]
    source: str = "pca_threshold"  # or "external"
    degenerate: bool = False

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        t, h, w = self.grid
        if self.bits.size != t * h * w:
            raise ValueError(f"mask length {self.bits.size} != token count {t * h * w}")

    @property
    def num_tokens(self) -> int:
        return int(self.bits.size)

    def frame(self, f: int) -> np.ndarray:
        t, h, w = self.grid
        return self.bits.reshape(t, h * w)[f]


@dataclass
class BlockProfile:
    """Foreground-focus matrix over (block, step); NaN marks undefined."""

    r_attn: np.ndarray  # (L, S) float, NaN where the mask was empty
    high_percentile: float = DEFAULT_HIGH_PERCENTILE
    tau: float = DEFAULT_TAU
    thresholds: np.ndarray | None = None  # (L, S) per-pair attention cutoffs

    @property
    def num_blocks(self) -> int:
        return int(self.r_attn.shape[0])

    @property
    def num_steps(self) -> int:
        return int(self.r_attn.shape[1])


def aggregate_attention(a: np.ndarray, orientation: str = "column") -> np.ndarray:
    """Mean attention per token from a row-stochastic matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"attention matrix must be square, got {a.shape}")
    row_sums = a.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-9 or a.min() < -1e-12:
        raise ContractViolation("attention matrix is not row-stochastic within 1e-9")
    if orientation == "column":
        return a.mean(axis=0)
    if orientation == "row":
        return a.mean(axis=1)
    raise ValueError(f"unknown orientation {orientation!r}")


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a 1-D sample, returned in the input's scale.

    Maximizes between-class variance over histogram bin edges; ties go to
    the first maximum, so the result is deterministic.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise ValueError("cannot threshold a constant sample")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    total = values.size
    counts = hist.astype(np.float64)
    w0 = np.cumsum(counts)
    centers = (edges[:-1] + edges[1:]) / 2.0
    mass = np.cumsum(counts * centers)
    total_mass = mass[-1]
    best_k, best_score = 0, -1.0
    for k in range(bins - 1):
        n0 = w0[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = mass[k] / n0
        mu1 = (total_mass - mass[k]) / n1
        score = n0 * n1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_score, best_k = score, k
    return float(edges[best_k + 1])


def segment_foreground(latent: np.ndarray, source: str = "pca_threshold") -> ForegroundMask:
    """Foreground mask from a (C, T, H, W) latent via PCA + Otsu.

    Tokens are projected onto the top principal components of the channel
    covariance; the leading-component scores are min-max normalized (making
    the mask invariant to uniform positive scaling) and Otsu-thresholded.
    Whichever side is smaller is declared foreground. Zero channel variance
    yields an empty mask flagged degenerate instead of an error.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 4:
        raise ValueError(f"latent must be (C, T, H, W), got shape {latent.shape}")
    c = latent.shape[0]
    grid = tuple(int(g) for g in latent.shape[1:])
    n = int(np.prod(grid))
    if n < 2:
        raise ValueError("need at least 2 tokens to segment")
    tokens = np.moveaxis(latent, 0, -1).reshape(n, c)
    centered = tokens - tokens.mean(axis=0, keepdims=True)
    if np.max(np.abs(centered)) == 0.0:
        return ForegroundMask(np.zeros(n, dtype=bool), grid, source=source, degenerate=True)
    cov = matmul(centered.T, centered) / n
    vecs = top_eigvecs(cov, min(3, c))
    scores = matmul(centered, vecs)[:, 0]
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        return ForegroundMask(np.zeros(n, dtype=bool), grid, source=source, degenerate=True)
    normed = (scores - lo) / (hi - lo)
    mask = normed > otsu_threshold(normed)
    if mask.sum() > n / 2:
        mask = ~mask  # foreground is by convention the minority region
    return ForegroundMask(mask, grid, source=source)


def compute_r_attn(a_bar: np.ndarray, mask: ForegroundMask, high_threshold: float) -> float | None:
    """Fraction of foreground tokens that are high-attention tokens.

    Computed per frame (high-and-foreground count over foreground count) and
    averaged over frames that contain any foreground; returns None when the
    whole mask is empty.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64).reshape(-1)
    if a_bar.size != mask.num_tokens:
        raise ValueError(f"score length {a_bar.size} != mask length {mask.num_tokens}")
    high = a_bar > high_threshold
    frames = mask.grid[0]
    per_frame = a_bar.size // frames
    values = []
    for f in range(frames):
        sl = slice(f * per_frame, (f + 1) * per_frame)
        fg = mask.bits[sl]
        n_fg = int(fg.sum())
        if n_fg == 0:
            continue
        values.append(int((high[sl] & fg).sum()) / n_fg)
    if not values:
        return None
    return sum(values) / len(values)


def partition_blocks(
    profile: BlockProfile, tau: float | None = None, step_range: tuple[int, int] | None = None
) -> BlockPartition:
    """Threshold per-block mean foreground focus into F/B lists.

    Blocks average their defined (non-NaN) entries over `step_range`
    (default: all steps); mean >= tau goes foreground. Blocks with no
    defined entries are never cached, i.e. they land in foreground.
    """
    tau = profile.tau if tau is None else tau
    lo, hi = step_range if step_range is not None else (0, profile.num_steps)
    if not 0 <= lo < hi <= profile.num_steps:
        raise ValueError(f"step range [{lo}, {hi}) outside [0, {profile.num_steps})")
    fg, bg = [], []
    for b in range(profile.num_blocks):
        row = profile.r_attn[b, lo:hi]
        defined = row[~np.isnan(row)]
        if defined.size == 0 or float(defined.mean()) >= tau:
            fg.append(b)
        else:
            bg.append(b)
    return BlockPartition(foreground=tuple(fg), background=tuple(bg))


def l1_step_distance(preds) -> np.ndarray:
    """Mean absolute difference between consecutive noise predictions."""
    preds = list(preds)
    if len(preds) < 2:
        raise ValueError("need at least two predictions")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ValueError("prediction shapes differ")
    return np.array([float(np.mean(np.abs(b - a))) for a, b in zip(preds, preds[1:])])


def export_heatmap(profile: BlockProfile) -> list[tuple[int, int, float]]:
    """CSV-ready (block, step, r_attn) rows; undefined entries are omitted."""
    rows = []
    for b in range(profile.num_blocks):
        for s in range(profile.num_steps):
            v = profile.r_attn[b, s]
            if not np.isnan(v):
                rows.append((b, s, float(v)))
    return rows


def high_attention_threshold(a_bar: np.ndarray, percentile: float = DEFAULT_HIGH_PERCENTILE) -> float:
    """Scale-free cutoff: the given percentile of the step's token scores."""
    return float(np.percentile(np.asarray(a_bar, dtype=np.float64), percentile))


@dataclass
class ProfileBuilder:
    """Accumulates r_attn values block by block; mergeable by block index."""

    num_blocks: int
    num_steps: int
    high_percentile: float = DEFAULT_HIGH_PERCENTILE
    tau: float = DEFAULT_TAU
    orientation: str = "column"
    _r: np.ndarray = field(init=False)
    _thr: np.ndarray = field(init=False)

    def __post_init__(self):
        self._r = np.full((self.num_blocks, self.num_steps), np.nan)
        self._thr = np.full((self.num_blocks, self.num_steps), np.nan)

    def add(self, block: int, step: int, attention: np.ndarray, mask: ForegroundMask) -> None:
        a_bar = aggregate_attention(attention, orientation=self.orientation)
        thr = high_attention_threshold(a_bar, self.high_percentile)
        self._thr[block, step] = thr
        value = compute_r_attn(a_bar, mask, thr)
        if value is not None:
            self._r[block, step] = value

    def build(self) -> BlockProfile:
        return BlockProfile(
            r_attn=self._r.copy(),
            high_percentile=self.high_percentile,
            tau=self.tau,
            thresholds=self._thr.copy(),
        )


def load_mask_pgm(path, grid: tuple[int, int, int]) -> np.ndarray:
    """Read one frame's mask image; nonzero pixels are foreground."""
    img = read_pgm(path)
    _, h, w = grid
    if img.shape != (h, w):
        raise ValueError(f"mask image {img.shape} does not match frame grid {(h, w)}")
    return img.reshape(-1) != 0


def load_mask_frames(paths, grid: tuple[int, int, int]) -> ForegroundMask:
    """Assemble per-frame PGM masks into one external ForegroundMask."""
    t = grid[0]
    paths = list(paths)
    if len(paths) != t:
        raise ValueError(f"need {t} mask frames, got {len(paths)}")
    bits = np.concatenate([load_mask_pgm(p, grid) for p in paths])
    return ForegroundMask(bits, grid, source="external")
