import json
import math

import numpy as np
import pytest

from ditcache.cache import CacheEngine, StepSchedule
from ditcache.errors import ContractViolation
from ditcache.metrics import (
    RunArtifacts,
    compare_runs,
    flops_embed_unembed,
    flops_from_stats,
    flops_full_run,
    flops_per_block,
    mean_l1,
    psnr,
    report_to_dict,
    report_to_json,
    ssim,
)
from ditcache.model import RunStats, denoise_loop, init_model, linear_schedule
from ditcache.profiler import BlockPartition


def ssim_brute_force(a, b, peak, window=8):
    """Oracle: plain python loops, accumulating moments element by element."""
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    pa = np.asarray(a, float).reshape(-1, a.shape[-2], a.shape[-1])
    pb = np.asarray(b, float).reshape(-1, b.shape[-2], b.shape[-1])
    n = window * window
    values = []
    for pl_a, pl_b in zip(pa, pb):
        h, w = pl_a.shape
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                xs = [pl_a[i + u, j + v] for u in range(window) for v in range(window)]
                ys = [pl_b[i + u, j + v] for u in range(window) for v in range(window)]
                mx = sum(xs) / n
                my = sum(ys) / n
                vx = sum((x - mx) ** 2 for x in xs) / n
                vy = sum((y - my) ** 2 for y in ys) / n
                cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
                values.append(
                    ((2 * mx * my + c1) * (2 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return sum(values) / len(values)


class TestPsnr:
    def test_identical_infinite(self, rng):
        a = rng.standard_normal((2, 1, 4, 4))
        assert psnr(a, a.copy(), peak=1.0) == math.inf

    def test_unit_difference_zero_db(self):
        a = np.zeros((1, 1, 4, 4))
        assert psnr(a, a + 1.0, peak=1.0) == 0.0

    def test_half_difference(self):
        a = np.zeros((1, 1, 4, 4))
        b = a.copy()
        b[0, 0, :2, :] = 1.0  # half the elements differ by 1 -> MSE 0.5
        assert abs(psnr(a, b, peak=1.0) - 10.0 * math.log10(2.0)) <= 1e-9

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
        assert psnr(a, b, 2.0) == psnr(b, a, 2.0)

    def test_decreasing_in_mse(self, rng):
        a = np.zeros((4, 4))
        assert psnr(a, a + 0.1, 1.0) > psnr(a, a + 0.2, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)), 1.0)

    def test_bad_peak(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


class TestSsim:
    def test_identical_exactly_one(self, rng):
        a = rng.standard_normal((2, 2, 9, 10))
        assert ssim(a, a.copy(), peak=1.0) == 1.0

    def test_constant_shift_matches_brute_force(self, rng):
        a = rng.standard_normal((1, 1, 8, 8))
        b = a + 0.5
        got = ssim(a, b, peak=2.0)
        assert got < 1.0  # luminance term dips, contrast/structure stay 1
        assert abs(got - ssim_brute_force(a, b, 2.0)) <= 1e-12

    def test_negated_zero_mean_matches_brute_force(self, rng):
        a = rng.standard_normal((1, 1, 8, 8))
        a -= a.mean()
        got = ssim(a, -a, peak=1.0)
        assert got < 0.0
        assert abs(got - ssim_brute_force(a, -a, 1.0)) <= 1e-12

    def test_random_pairs_match_brute_force(self, rng):
        for _ in range(5):
            a = rng.standard_normal((1, 1, 9, 11))
            b = a + 0.2 * rng.standard_normal(a.shape)
            assert abs(ssim(a, b, 1.5) - ssim_brute_force(a, b, 1.5)) <= 1e-12

    def test_bounded(self, rng):
        for _ in range(10):
            a = rng.standard_normal((1, 1, 8, 9)) * rng.uniform(0.1, 10)
            b = rng.standard_normal(a.shape) * rng.uniform(0.1, 10)
            assert -1.0 <= ssim(a, b, peak=float(np.ptp(a)) or 1.0) <= 1.0

    def test_frame_smaller_than_window(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)), 1.0)


class TestFlops:
    def test_hand_expanded_count(self):
        # L=2, C=4, N=8, S=1:
        # per block: 8*8*16 + 4*64*4 + 16*8*16 = 1024 + 1024 + 2048 = 4096
        # embed/unembed per step: 4*8*16 = 512
        model = init_model(1, 2, 4, (1, 2, 4))
        assert flops_per_block(8, 4) == 4096
        assert flops_embed_unembed(8, 4) == 512
        assert flops_full_run(model, 1) == 2 * 4096 + 512

    def test_zero_steps(self):
        model = init_model(1, 2, 4, (1, 2, 4))
        assert flops_full_run(model, 0) == 0

    def test_linear_in_steps(self):
        model = init_model(1, 3, 8, (2, 2, 2))
        assert flops_full_run(model, 10) == 2 * flops_full_run(model, 5)

    def test_conservation_against_engine_run(self, rng):
        model = init_model(5, 4, 8, (1, 4, 4))
        sched = linear_schedule(7)
        part = BlockPartition(foreground=(0, 3), background=(1, 2))
        engine = CacheEngine(part, StepSchedule.step_average(7, 2, warmup=1))
        x = rng.standard_normal((8, 1, 4, 4))
        _, _, stats = denoise_loop(model, x, sched, engine=engine)
        executed, skipped = flops_from_stats(model, stats)
        assert executed + skipped == flops_full_run(model, 7)


def make_artifacts(label, latent, steps=4, executed=None, skipped=0, wall=0.5, prov=None):
    model = init_model(9, 2, 4, (1, 2, 4))
    executed = executed if executed is not None else 2 * steps
    stats = RunStats(
        steps=steps,
        blocks_executed=executed,
        blocks_skipped=skipped,
        per_step_executed=[2] * steps,
        wall_s=wall,
        provenance=prov or {"seed": 1},
    )
    return RunArtifacts(label=label, final_latent=latent, stats=stats, model=model)


class TestCompareRuns:
    def test_self_comparison(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        ref = make_artifacts("reference", latent)
        report = compare_runs(make_artifacts("test", latent.copy()), ref)
        assert report.psnr == math.inf
        assert report.ssim == 1.0
        assert report.mean_l1 == 0.0
        assert report.speedup_flops == 1.0
        assert report.reference == "reference"

    def test_skipping_half_blocks_doubles_block_term(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        ref = make_artifacts("ref", latent)
        test = make_artifacts("test", latent, executed=4, skipped=4)
        report = compare_runs(test, ref)
        n, c = 8, 4
        expected = (4 * (2 * flops_per_block(n, c) + flops_embed_unembed(n, c))) / (
            4 * flops_embed_unembed(n, c) + 4 * flops_per_block(n, c)
        )
        assert report.speedup_flops == expected

    def test_wall_fields_opt_in(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        report = compare_runs(make_artifacts("t", latent), make_artifacts("r", latent))
        assert report.wall_ms is None and report.speedup_wall is None
        report = compare_runs(
            make_artifacts("t", latent, wall=0.25), make_artifacts("r", latent, wall=0.5), with_timings=True
        )
        assert report.wall_ms == 250.0 and report.speedup_wall == 2.0

    def test_provenance_mismatch_refused(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        a = make_artifacts("t", latent, prov={"seed": 1})
        b = make_artifacts("r", latent, prov={"seed": 2})
        with pytest.raises(ContractViolation):
            compare_runs(a, b)

    def test_report_json_fixed_key_order(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        report = compare_runs(make_artifacts("t", latent), make_artifacts("r", latent))
        text = report_to_json(report)
        data = json.loads(text)
        assert list(data) == [
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
        assert data["psnr"] == "inf"
        assert data["wall_ms"] is None

    def test_mean_l1(self, rng):
        a = rng.standard_normal((3, 3))
        assert mean_l1(a, a + 2.0) == 2.0
        with pytest.raises(ValueError):
            mean_l1(a, np.zeros((2, 2)))

    def test_report_dict_round_trips(self, rng):
        latent = rng.standard_normal((4, 1, 8, 8))
        report = compare_runs(make_artifacts("t", latent + 0.1), make_artifacts("r", latent))
        data = report_to_dict(report)
        assert data["psnr"] == report.psnr
        assert data["flops_executed"] == report.flops_executed
