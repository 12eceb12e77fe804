"""Block-level delta caching with step-level scheduling.

The engine owns the block loop of one denoising run. On a compute step every
block executes and the engine stores, per cache entry, the deviation between
the hidden state entering the entry's first block and the one leaving its
last block. On a utilization step, entries whose blocks are reusable under
the active pattern are skipped with a single boundary addition of that
stored deviation; everything else executes normally.

Entries cover maximal runs of consecutive cacheable block indices, plus
singletons, so one addition can stand in for a whole stretch of skipped
blocks. Reuse applies the most recently computed deviation by default; an
accumulated mode (running sum of deviations across compute steps) is kept as
a switchable experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, StaleCacheError
from .model import DiTBlock, StepTraceEntry, TraceFlags, block_forward
from .profiler import BlockPartition

PATTERN_KINDS = ("background_only", "foreground_only", "split", "alternate")
SCHEDULE_KINDS = ("stepwise", "step_inverse", "step_average", "adaptive")


# ---------------------------------------------------------------------------
# Delta list
# ---------------------------------------------------------------------------


@dataclass
class DeltaEntry:
    """One cache entry: a single block or an inclusive run [start..end]."""

    start: int
    end: int
    delta: np.ndarray | None = None
    accum: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return "single" if self.start == self.end else "run"

    @property
    def span(self) -> int:
        return self.end - self.start + 1


def merge_runs(indices) -> list[DeltaEntry]:
    """Merge sorted unique block indices into maximal-run entries."""
    entries: list[DeltaEntry] = []
    for i in sorted(set(indices)):
        if entries and i == entries[-1].end + 1:
            entries[-1].end = i
        else:
            entries.append(DeltaEntry(start=i, end=i))
    return entries


def build_delta_list(partition: BlockPartition) -> list[DeltaEntry]:
    """Delta list over the background blocks: runs merged, singles kept."""
    return merge_runs(partition.background)


# ---------------------------------------------------------------------------
# Step schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSchedule:
    """Caching interval as a function of the forward step index.

    `warmup` steps (s <= warmup) always compute. Beyond that, step s is a
    compute step iff (s - warmup) mod interval_at(s) == 0; the rest are
    utilization steps. Listed kinds split [warmup, total) into equal
    contiguous phases, one per listed interval, remainder on the last phase.
    """

    kind: str
    total: int
    warmup: int = 0
    intervals: tuple[int, ...] = ()
    t_fixed: int = 1
    t_max: int = 1
    t_min: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total < 1:
            raise ValueError("schedule needs at least one step")
        if not 0 <= self.warmup < self.total:
            raise ValueError("warmup must satisfy 0 <= warmup < total")
        if self.kind in ("stepwise", "step_inverse"):
            if not self.intervals:
                raise ValueError(f"{self.kind} schedule needs an interval list")
            if any(t < 1 for t in self.intervals):
                raise ValueError("intervals must be >= 1")
            diffs = [b - a for a, b in zip(self.intervals, self.intervals[1:])]
            if self.kind == "stepwise" and any(d > 0 for d in diffs):
                raise ValueError("stepwise intervals must be non-increasing")
            if self.kind == "step_inverse" and any(d < 0 for d in diffs):
                raise ValueError("step_inverse intervals must be non-decreasing")
        if self.kind == "step_average" and self.t_fixed < 1:
            raise ValueError("fixed interval must be >= 1")
        if self.kind == "adaptive" and (self.t_max < 1 or self.t_min < 1):
            raise ValueError("adaptive intervals must be >= 1")

    @classmethod
    def stepwise(cls, total, intervals, warmup=0):
        return cls(kind="stepwise", total=total, warmup=warmup, intervals=tuple(intervals))

    @classmethod
    def step_inverse(cls, total, intervals, warmup=0):
        return cls(kind="step_inverse", total=total, warmup=warmup, intervals=tuple(intervals))

    @classmethod
    def step_average(cls, total, t, warmup=0):
        return cls(kind="step_average", total=total, warmup=warmup, t_fixed=int(t))

    @classmethod
    def adaptive(cls, total, t_max, t_min, warmup=0):
        return cls(kind="adaptive", total=total, warmup=warmup, t_max=int(t_max), t_min=int(t_min))

    def adaptive_raw(self, s: int) -> float:
        """Linear interpolation from t_max at warmup down to t_min at total."""
        return self.t_max - (self.t_max - self.t_min) * (s - self.warmup) / (self.total - self.warmup)

    def interval_at(self, s: int) -> int:
        if not self.warmup <= s <= self.total:
            raise ValueError(f"step {s} outside [{self.warmup}, {self.total}]")
        if self.kind == "step_average":
            return self.t_fixed
        if self.kind == "adaptive":
            # round half-up, clamp to a sane interval
            return max(1, int(np.floor(self.adaptive_raw(s) + 0.5)))
        n = len(self.intervals)
        base = (self.total - self.warmup) // n
        phase = n - 1 if base == 0 else min((s - self.warmup) // base, n - 1)
        return self.intervals[phase]


@dataclass(frozen=True)
class ReusePattern:
    """Which side of the partition may be reused at which steps."""

    kind: str
    boundary: int | None = None  # split: step where reuse flips F -> B
    segment: int = 1  # alternate: steps per segment

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown reuse pattern {self.kind!r}")
        if self.kind == "split" and self.boundary is None:
            raise ValueError("split pattern needs a boundary step")
        if self.kind == "alternate" and self.segment < 1:
            raise ValueError("alternate segment length must be >= 1")

    def sides(self) -> tuple[str, ...]:
        if self.kind == "background_only":
            return ("background",)
        if self.kind == "foreground_only":
            return ("foreground",)
        return ("background", "foreground")


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class CacheEngine:
    """Delta cache plus schedule plus reuse pattern for one denoising run.

    The engine keeps a delta list per reusable side of the partition (only
    the background side for background_only, only the foreground side for
    foreground_only, both for split/alternate) and refreshes every entry on
    every compute step. The ledger counts block evaluations: executed plus
    skipped always equals L times the number of processed steps.
    """

    def __init__(
        self,
        partition: BlockPartition,
        schedule: StepSchedule,
        pattern: ReusePattern | None = None,
        accumulated: bool = False,
    ):
        pattern = pattern or ReusePattern(kind="background_only")
        if pattern.kind == "split" and not schedule.warmup < pattern.boundary < schedule.total:
            raise ValueError("split boundary must lie inside (warmup, total)")
        self.partition = partition
        self.schedule = schedule
        self.pattern = pattern
        self.accumulated = accumulated
        self.sides: dict[str, list[DeltaEntry]] = {}
        for side in pattern.sides():
            members = partition.background if side == "background" else partition.foreground
            self.sides[side] = merge_runs(members)
        self.reset()

    # -- schedule queries ---------------------------------------------------

    def interval_at(self, s: int) -> int:
        return self.schedule.interval_at(s)

    def is_compute_step(self, s: int) -> bool:
        if s <= self.schedule.warmup:
            return True
        return (s - self.schedule.warmup) % self.schedule.interval_at(s) == 0

    def reusable_blocks(self, s: int) -> frozenset[int]:
        """Block indices eligible for reuse at utilization step s."""
        if s <= self.schedule.warmup:
            raise ValueError(f"step {s} is inside the warm-up phase")
        kind = self.pattern.kind
        if kind == "background_only":
            return frozenset(self.partition.background)
        if kind == "foreground_only":
            return frozenset(self.partition.foreground)
        if kind == "split":
            if s < self.pattern.boundary:
                return frozenset(self.partition.foreground)
            return frozenset(self.partition.background)
        segment = (s - self.schedule.warmup - 1) // self.pattern.segment
        if segment % 2 == 0:
            return frozenset(self.partition.background)
        return frozenset(self.partition.foreground)

    # -- state --------------------------------------------------------------

    def reset(self) -> None:
        for entries in self.sides.values():
            for entry in entries:
                entry.delta = None
                entry.accum = None
        self._boundaries: list[np.ndarray] | None = None
        self.last_compute_step: int | None = None
        self.blocks_executed = 0
        self.blocks_skipped = 0
        self.steps_processed = 0

    def dump_state(self) -> list[dict]:
        """Debug view: one record per entry with an FNV-1a delta checksum."""
        records = []
        for side in sorted(self.sides):
            for entry in self.sides[side]:
                delta = entry.accum if self.accumulated else entry.delta
                records.append(
                    {
                        "side": side,
                        "kind": entry.kind,
                        "start": entry.start,
                        "end": entry.end,
                        "checksum": None if delta is None else fnv1a64(delta.astype("<f8").tobytes()),
                    }
                )
        return records

    # -- the block loop -----------------------------------------------------

    def apply_step(
        self,
        blocks: list[DiTBlock],
        h: np.ndarray,
        s: int,
        flags: TraceFlags | None = None,
        sink: StepTraceEntry | None = None,
    ) -> np.ndarray:
        flags = flags or TraceFlags()
        if self.is_compute_step(s):
            h = self._compute_pass(blocks, h, s, flags, sink)
        else:
            h = self._utilization_pass(blocks, h, s, self.reusable_blocks(s), flags, sink)
        self.steps_processed += 1
        return h

    def _execute_block(self, block, h, s, flags, sink):
        h_prev = h
        h, a = block_forward(block, h, want_attention=flags.attention)
        if not np.isfinite(h).all():
            raise NonFiniteError(
                f"non-finite hidden state at step {s}, block {block.index}",
                step=s,
                block=block.index,
            )
        if sink is not None:
            sink.record(flags, block.index, h_prev, h, a)
        self.blocks_executed += 1
        return h

    def _compute_pass(self, blocks, h, s, flags, sink):
        bounds = [h]
        for block in blocks:
            h = self._execute_block(block, h, s, flags, sink)
            bounds.append(h)
        for entries in self.sides.values():
            for entry in entries:
                delta = bounds[entry.end + 1] - bounds[entry.start]
                entry.delta = delta
                if self.accumulated:
                    entry.accum = delta if entry.accum is None else entry.accum + delta
        self._boundaries = bounds
        self.last_compute_step = s
        return h

    def _utilization_pass(self, blocks, h, s, reusable, flags, sink):
        covered: dict[int, DeltaEntry] = {}
        for entries in self.sides.values():
            for entry in entries:
                for i in range(entry.start, entry.end + 1):
                    covered[i] = entry
        i = 0
        while i < len(blocks):
            entry = covered.get(i)
            if entry is None or i not in reusable:
                h = self._execute_block(blocks[i], h, s, flags, sink)
                i += 1
                continue
            if entry.delta is None:
                raise StaleCacheError(
                    f"{entry.kind}({entry.start},{entry.end}) reused at step {s} "
                    "before any compute step stored its delta"
                )
            if i == entry.start and all(j in reusable for j in range(entry.start, entry.end + 1)):
                h = h + (entry.accum if self.accumulated else entry.delta)
                self.blocks_skipped += entry.span
                i = entry.end + 1
                continue
            # Partial reuse: the pattern wants full computation somewhere
            # inside this entry, so split it into the maximal reusable
            # sub-run starting at i, using the boundaries captured on the
            # last compute step.
            j = i
            while j + 1 <= entry.end and (j + 1) in reusable:
                j += 1
            if self._boundaries is None:
                raise StaleCacheError(
                    f"{entry.kind}({entry.start},{entry.end}) partially reused at step {s} "
                    "with no stored boundaries"
                )
            h = h + (self._boundaries[j + 1] - self._boundaries[i])
            self.blocks_skipped += j - i + 1
            i = j + 1
        return h
