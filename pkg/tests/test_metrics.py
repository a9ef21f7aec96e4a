"""PSNR/SSIM against brute-force oracles, report schema round trips."""

import numpy as np
import pytest

from exo2ego.errors import IOFailure, ShapeError
from exo2ego.metrics import (
    LUMA_WEIGHTS,
    MetricReport,
    evaluate_videos,
    psnr,
    ssim,
    ssim_luma_only,
    _gaussian_window,
)

RNG = np.random.default_rng(0)


def brute_force_psnr(a, b):
    """Direct per-pixel reimplementation on the [0,1] scale."""
    a01, b01 = (a + 1) / 2, (b + 1) / 2
    vals = []
    for f in range(a.shape[0]):
        se, n = 0.0, 0
        for idx in np.ndindex(*a01[f].shape):
            se += (a01[f][idx] - b01[f][idx]) ** 2
            n += 1
        mse = se / n
        vals.append(100.0 if mse < 1e-10 else min(100.0, 10 * np.log10(1 / mse)))
    return float(np.mean(vals))


def brute_force_ssim_frame(x, y, win):
    """Sliding-window loop oracle on one luma pair (valid region)."""
    H, W = x.shape
    k = len(win)
    w2d = np.outer(win, win)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(H - k + 1):
        for j in range(W - k + 1):
            px = x[i:i + k, j:j + k]
            py = y[i:i + k, j:j + k]
            mx = (w2d * px).sum()
            my = (w2d * py).sum()
            vx = (w2d * px * px).sum() - mx ** 2
            vy = (w2d * py * py).sum() - my ** 2
            cxy = (w2d * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestPSNR:
    def test_identical_capped_at_100(self):
        v = RNG.uniform(-1, 1, size=(3, 3, 8, 8))
        assert psnr(v, v) == 100.0

    def test_known_mse_closed_form(self):
        a = np.zeros((1, 3, 10, 10))
        b = np.full((1, 3, 10, 10), 0.2)   # maps to 0.1 offset in [0,1]: MSE 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_matches_brute_force_oracle(self):
        a = RNG.uniform(-1, 1, size=(2, 3, 6, 6))
        b = RNG.uniform(-1, 1, size=(2, 3, 6, 6))
        assert psnr(a, b) == pytest.approx(brute_force_psnr(a, b), abs=1e-9)

    def test_symmetry_and_monotonicity(self):
        a = RNG.uniform(-1, 1, size=(1, 3, 8, 8))
        b = a + 0.1
        c = a + 0.3
        assert psnr(a, b) == psnr(b, a)
        assert psnr(np.clip(a, -1, 1), np.clip(b, -1, 1)) > psnr(np.clip(a, -1, 1), np.clip(c, -1, 1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 8, 9)))


class TestSSIM:
    def test_identity_is_one(self):
        v = RNG.uniform(-1, 1, size=(2, 3, 16, 16))
        assert ssim(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_structured_image_negative(self):
        yy, xx = np.meshgrid(np.linspace(-1, 1, 16), np.linspace(-1, 1, 16), indexing="ij")
        pattern = np.sign(np.sin(6 * yy) * np.sin(6 * xx)) * 0.8
        a = np.stack([np.stack([pattern] * 3)])
        b = -a
        assert ssim(a, b) < 0

    def test_matches_sliding_window_oracle(self):
        a = RNG.uniform(-1, 1, size=(1, 3, 14, 14))
        b = np.clip(a + RNG.normal(scale=0.2, size=a.shape), -1, 1)
        win = _gaussian_window(11, 1.5)
        xa = np.tensordot(LUMA_WEIGHTS, (a[0] + 1) / 2, axes=(0, 0))
        xb = np.tensordot(LUMA_WEIGHTS, (b[0] + 1) / 2, axes=(0, 0))
        oracle = brute_force_ssim_frame(xa, xb, win)
        assert ssim(a, b) == pytest.approx(oracle, abs=1e-9)

    def test_constant_images_luminance_term_only(self):
        a = np.full((1, 3, 16, 16), 0.2)    # luma 0.6 on [0,1]
        b = np.full((1, 3, 16, 16), -0.4)   # luma 0.3
        expect = ssim_luma_only(0.6, 0.3)
        assert ssim(a, b) == pytest.approx(expect, abs=1e-9)

    def test_symmetry(self):
        a = RNG.uniform(-1, 1, size=(1, 3, 12, 12))
        b = RNG.uniform(-1, 1, size=(1, 3, 12, 12))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_small_frames_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 8, 8)))


class TestReport:
    def test_round_trip(self, tmp_path):
        rep = MetricReport(config_hash="abc", seed=3)
        rep.add("v1", "synthetic", 21.5, 0.71)
        rep.add("v2", "synthetic", 19.5, 0.65, lpips_val=0.4)
        rep.finalize()
        path = tmp_path / "report.json"
        rep.save(path)
        loaded = MetricReport.load(path)
        assert loaded.config_hash == "abc"
        assert loaded.per_video == rep.per_video
        assert loaded.aggregates == rep.aggregates

    def test_aggregates_mean_and_stderr(self):
        rep = MetricReport()
        rep.add("a", "x", 10.0, 0.5)
        rep.add("b", "x", 20.0, 0.7)
        rep.finalize()
        agg = rep.aggregates["x"]["psnr"]
        assert agg["mean"] == pytest.approx(15.0)
        assert agg["stderr"] == pytest.approx(np.std([10, 20], ddof=1) / np.sqrt(2))

    def test_ssim_range_enforced(self):
        rep = MetricReport()
        with pytest.raises(ShapeError):
            rep.add("a", "x", 10.0, 1.5)

    def test_malformed_json_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{}")
        with pytest.raises(IOFailure):
            MetricReport.load(p)

    def test_evaluate_videos_gt_upper_bound(self):
        v = RNG.uniform(-1, 1, size=(2, 3, 16, 16))
        rep = evaluate_videos([("v", "synthetic", v, v)])
        assert rep.aggregates["all"]["psnr"]["mean"] == 100.0
        assert rep.aggregates["all"]["ssim"]["mean"] == pytest.approx(1.0)

    def test_pluggable_perceptual_metric(self):
        v = RNG.uniform(-1, 1, size=(1, 3, 16, 16))
        rep = evaluate_videos([("v", "c", v, v)], lpips_fn=lambda a, b: 0.123)
        assert rep.per_video[0]["lpips"] == 0.123
        rep2 = evaluate_videos([("v", "c", v, v)])
        assert "lpips" not in rep2.per_video[0]

    def test_determinism_same_inputs_same_report(self):
        a = RNG.uniform(-1, 1, size=(1, 3, 16, 16))
        b = RNG.uniform(-1, 1, size=(1, 3, 16, 16))
        r1 = evaluate_videos([("v", "c", a, b)], config_hash="h", seed=1)
        r2 = evaluate_videos([("v", "c", a, b)], config_hash="h", seed=1)
        assert r1.to_json() == r2.to_json()
