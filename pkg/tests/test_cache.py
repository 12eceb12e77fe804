import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditcache.cache import (
    CacheEngine,
    DeltaEntry,
    ReusePattern,
    StepSchedule,
    build_delta_list,
    fnv1a64,
    merge_runs,
)
from ditcache.errors import StaleCacheError
from ditcache.model import block_forward, init_model
from ditcache.profiler import BlockPartition


def brute_force_runs(indices):
    """Oracle: expand to a sorted list and merge adjacent by scanning."""
    idx = sorted(set(indices))
    runs = []
    for i in idx:
        if runs and runs[-1][1] + 1 == i:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    return [tuple(r) for r in runs]


class TestDeltaList:
    def test_runs_and_singles(self):
        p = BlockPartition(foreground=(0, 4, 5, 6, 8, 9), background=(1, 2, 3, 7))
        entries = build_delta_list(p)
        assert [(e.start, e.end) for e in entries] == [(1, 3), (7, 7)]
        assert [e.kind for e in entries] == ["run", "single"]

    def test_empty_background(self):
        p = BlockPartition(foreground=(0, 1, 2), background=())
        assert build_delta_list(p) == []

    def test_all_background(self):
        p = BlockPartition(foreground=(), background=(0, 1, 2, 3))
        entries = build_delta_list(p)
        assert [(e.start, e.end) for e in entries] == [(0, 3)]

    @settings(max_examples=100, deadline=None)
    @given(st.sets(st.integers(0, 15)))
    def test_matches_brute_force(self, background):
        got = [(e.start, e.end) for e in merge_runs(background)]
        assert got == brute_force_runs(background)
        covered = set()
        for s, e in got:
            covered.update(range(s, e + 1))
        assert covered == set(background)


class TestStepSchedule:
    def test_stepwise_phase_lookup(self):
        s = StepSchedule.stepwise(50, (12, 9, 6, 3), warmup=2)
        assert s.interval_at(5) == 12

    def test_stepwise_phases_cover_range(self):
        s = StepSchedule.stepwise(10, (4, 2), warmup=2)
        # phases of four steps each: [2..5] -> 4, [6..9] -> 2
        assert [s.interval_at(x) for x in range(2, 10)] == [4, 4, 4, 4, 2, 2, 2, 2]

    def test_stepwise_remainder_to_last_phase(self):
        s = StepSchedule.stepwise(9, (3, 1), warmup=0)
        # base 4: [0..3] -> 3, [4..8] -> 1
        assert [s.interval_at(x) for x in range(9)] == [3, 3, 3, 3, 1, 1, 1, 1, 1]

    def test_more_phases_than_steps(self):
        s = StepSchedule.stepwise(4, (9, 8, 7, 6, 5), warmup=2)
        assert s.interval_at(3) == 5  # degenerate split: everything in last phase

    def test_stepwise_requires_non_increasing(self):
        with pytest.raises(ValueError):
            StepSchedule.stepwise(20, (3, 6, 9))

    def test_step_inverse_requires_non_decreasing(self):
        with pytest.raises(ValueError):
            StepSchedule.step_inverse(20, (9, 6, 3))
        StepSchedule.step_inverse(20, (3, 6, 9))  # fine

    def test_step_inverse_non_decreasing_over_steps(self):
        s = StepSchedule.step_inverse(10, (1, 2, 4), warmup=1)
        values = [s.interval_at(x) for x in range(1, 10)]
        assert values == sorted(values)

    def test_adaptive_endpoints(self):
        s = StepSchedule.adaptive(50, t_max=12, t_min=3, warmup=2)
        assert s.interval_at(2) == 12
        assert s.interval_at(50) == 3

    def test_adaptive_round_half_up(self):
        s = StepSchedule.adaptive(50, t_max=12, t_min=3, warmup=10)
        assert s.adaptive_raw(30) == 7.5
        assert s.interval_at(30) == 8

    def test_adaptive_clamped_to_one(self):
        s = StepSchedule.adaptive(10, t_max=1, t_min=1, warmup=0)
        assert all(s.interval_at(x) == 1 for x in range(11))

    def test_out_of_range(self):
        s = StepSchedule.step_average(10, 2, warmup=3)
        with pytest.raises(ValueError):
            s.interval_at(2)
        with pytest.raises(ValueError):
            s.interval_at(11)

    def test_warmup_bounds(self):
        with pytest.raises(ValueError):
            StepSchedule.step_average(10, 2, warmup=10)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 12), min_size=1, max_size=5), st.integers(0, 5))
    def test_stepwise_non_increasing_over_steps(self, intervals, warmup):
        intervals = sorted(intervals, reverse=True)
        total = warmup + 17
        s = StepSchedule.stepwise(total, intervals, warmup=warmup)
        values = [s.interval_at(x) for x in range(warmup, total)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestComputeSteps:
    def engine(self, schedule, fg=(0, 3), bg=(1, 2), pattern=None):
        part = BlockPartition(foreground=fg, background=bg)
        return CacheEngine(part, schedule, pattern)

    def test_warmup_is_compute(self):
        e = self.engine(StepSchedule.step_average(10, 3, warmup=3))
        assert all(e.is_compute_step(s) for s in range(4))

    def test_fixed_interval_pattern(self):
        e = self.engine(StepSchedule.step_average(10, 3, warmup=3))
        assert e.is_compute_step(6)
        assert not e.is_compute_step(7)

    def test_interval_one_every_step_computes(self):
        e = self.engine(StepSchedule.step_average(10, 1, warmup=0))
        assert all(e.is_compute_step(s) for s in range(10))


class TestReusableBlocks:
    def make(self, pattern, warmup=2, total=40):
        part = BlockPartition(foreground=(0, 3), background=(1, 2))
        return CacheEngine(part, StepSchedule.step_average(total, 3, warmup=warmup), pattern)

    def test_background_only(self):
        e = self.make(ReusePattern(kind="background_only"))
        assert e.reusable_blocks(5) == frozenset({1, 2})

    def test_foreground_only(self):
        e = self.make(ReusePattern(kind="foreground_only"))
        assert e.reusable_blocks(5) == frozenset({0, 3})

    def test_split(self):
        e = self.make(ReusePattern(kind="split", boundary=25))
        assert e.reusable_blocks(10) == frozenset({0, 3})
        assert e.reusable_blocks(30) == frozenset({1, 2})
        assert e.reusable_blocks(25) == frozenset({1, 2})

    def test_alternate_strictly_alternates(self):
        e = self.make(ReusePattern(kind="alternate", segment=1))
        sides = [e.reusable_blocks(s) for s in (3, 4, 5, 6)]
        assert sides == [
            frozenset({1, 2}),
            frozenset({0, 3}),
            frozenset({1, 2}),
            frozenset({0, 3}),
        ]

    def test_alternate_segment_length(self):
        e = self.make(ReusePattern(kind="alternate", segment=2))
        assert e.reusable_blocks(3) == e.reusable_blocks(4) == frozenset({1, 2})
        assert e.reusable_blocks(5) == e.reusable_blocks(6) == frozenset({0, 3})

    def test_warmup_steps_rejected(self):
        e = self.make(ReusePattern(kind="background_only"))
        with pytest.raises(ValueError):
            e.reusable_blocks(2)

    def test_split_boundary_validated(self):
        part = BlockPartition(foreground=(0,), background=(1,))
        with pytest.raises(ValueError):
            CacheEngine(part, StepSchedule.step_average(10, 2, warmup=2), ReusePattern(kind="split", boundary=2))


class TestApplyStep:
    @pytest.fixture
    def setup(self, rng):
        model = init_model(11, 4, 8, (1, 4, 4))
        h = rng.standard_normal((16, 8))
        part = BlockPartition(foreground=(0, 3), background=(1, 2))
        return model, h, part

    def run_blocks(self, blocks, h):
        for b in blocks:
            h, _ = block_forward(b, h)
        return h

    def test_compute_step_matches_plain_forward(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        got = engine.apply_step(model.blocks, h, 0)
        assert np.array_equal(got, self.run_blocks(model.blocks, h))

    def test_utilization_reproduces_compute_output(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        out_compute = engine.apply_step(model.blocks, h, 0)
        out_reuse = engine.apply_step(model.blocks, h, 1)
        # h + (h_out - h_in) cannot be guaranteed bit-exact, only closed
        np.testing.assert_allclose(out_reuse, out_compute, rtol=0, atol=1e-12)

    def test_run_entry_single_addition_ledger(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        engine.apply_step(model.blocks, h, 0)
        assert engine.blocks_executed == 4 and engine.blocks_skipped == 0
        engine.apply_step(model.blocks, h, 1)
        assert engine.blocks_executed == 6 and engine.blocks_skipped == 2

    def test_ledger_conservation(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 3, warmup=1))
        for s in range(10):
            h = engine.apply_step(model.blocks, h, s)
        assert engine.blocks_executed + engine.blocks_skipped == 4 * 10
        assert engine.steps_processed == 10

    def test_stale_cache_error_names_entry_and_step(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        engine.apply_step(model.blocks, h, 0)
        engine.reset()
        with pytest.raises(StaleCacheError) as err:
            engine.apply_step(model.blocks, h, 1)
        assert "run(1,2)" in str(err.value) and "step 1" in str(err.value)

    def test_reset_clears_everything(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        engine.apply_step(model.blocks, h, 0)
        engine.apply_step(model.blocks, h, 1)
        engine.reset()
        assert engine.blocks_executed == 0 and engine.blocks_skipped == 0
        assert engine.last_compute_step is None
        assert all(e.delta is None for e in engine.sides["background"])

    def test_reset_then_rerun_identical(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        first = [engine.apply_step(model.blocks, h, s) for s in range(4)]
        engine.reset()
        second = [engine.apply_step(model.blocks, h, s) for s in range(4)]
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_foreground_only_pattern_skips_foreground(self, setup):
        model, h, part = setup
        engine = CacheEngine(
            part,
            StepSchedule.step_average(10, 2, warmup=0),
            ReusePattern(kind="foreground_only"),
        )
        engine.apply_step(model.blocks, h, 0)
        engine.apply_step(model.blocks, h, 1)
        # foreground blocks 0 and 3 are singles; both skipped
        assert engine.blocks_skipped == 2
        assert [(e.start, e.end) for e in engine.sides["foreground"]] == [(0, 0), (3, 3)]

    def test_alternate_pattern_builds_both_sides(self, setup):
        model, h, part = setup
        engine = CacheEngine(
            part,
            StepSchedule.step_average(10, 3, warmup=0),
            ReusePattern(kind="alternate", segment=1),
        )
        assert set(engine.sides) == {"background", "foreground"}

    def test_partial_reuse_splits_entry(self, setup):
        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        engine.apply_step(model.blocks, h, 0)
        # Force a reusable set that covers only block 1 of the run(1,2):
        # block 2 must execute, block 1 reuses a boundary-derived sub-delta.
        from ditcache.model import TraceFlags

        got = engine._utilization_pass(model.blocks, h, 1, frozenset({1}), TraceFlags(), None)
        want = h.copy()
        want, _ = block_forward(model.blocks[0], want)
        want = want + (engine._boundaries[2] - engine._boundaries[1])
        want, _ = block_forward(model.blocks[2], want)
        want, _ = block_forward(model.blocks[3], want)
        assert np.array_equal(got, want)

    def test_trace_entries_cover_executed_blocks_only(self, setup):
        from ditcache.model import StepTraceEntry, TraceFlags

        model, h, part = setup
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        flags = TraceFlags(attention=True)
        sink = StepTraceEntry()
        engine.apply_step(model.blocks, h, 0, flags=flags, sink=sink)
        assert sorted(sink.attention) == [0, 1, 2, 3]
        sink = StepTraceEntry()
        engine.apply_step(model.blocks, h, 1, flags=flags, sink=sink)
        assert sorted(sink.attention) == [0, 3]  # the run(1,2) was reused

    def test_accumulated_mode_sums_deltas(self, setup):
        model, h, part = setup
        engine = CacheEngine(
            part, StepSchedule.step_average(10, 2, warmup=0), accumulated=True
        )
        h0 = engine.apply_step(model.blocks, h, 0)
        entry = engine.sides["background"][0]
        first = entry.delta.copy()
        assert np.array_equal(entry.accum, first)
        engine.apply_step(model.blocks, h0, 2)  # second compute step
        assert np.array_equal(entry.accum, first + entry.delta)


class TestDumpState:
    def test_fnv1a64_known_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C

    def test_dump_before_and_after_compute(self, rng):
        model = init_model(11, 4, 8, (1, 4, 4))
        part = BlockPartition(foreground=(0, 3), background=(1, 2))
        engine = CacheEngine(part, StepSchedule.step_average(10, 2, warmup=0))
        before = engine.dump_state()
        assert before == [
            {"side": "background", "kind": "run", "start": 1, "end": 2, "checksum": None}
        ]
        engine.apply_step(model.blocks, rng.standard_normal((16, 8)), 0)
        after = engine.dump_state()
        assert isinstance(after[0]["checksum"], int)
