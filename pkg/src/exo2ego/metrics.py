"""Video quality metrics and evaluation reports.

PSNR and SSIM operate on [F, C, H, W] videos valued in [-1, 1] (mapped to
[0, 1] internally). SSIM follows the standard windowed form: 11x11 Gaussian
window with sigma 1.5, k1 = 0.01, k2 = 0.03, computed on BT.601 luminance,
maps averaged over the valid (fully-covered) region and over frames.

A perceptual metric can be plugged in as any callable taking two videos and
returning a scalar; none ships here (pretrained feature nets are out of
scope), so reports carry lpips only when a callable is supplied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.ndimage import correlate1d

from .errors import IOFailure, ShapeError

REPORT_SCHEMA = 1

PSNR_CAP = 100.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class PerceptualMetric(Protocol):
    def __call__(self, a: np.ndarray, b: np.ndarray) -> float: ...


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"videos must be [F,C,H,W], got {a.shape}")
    return (a + 1.0) / 2.0, (b + 1.0) / 2.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame 10*log10(1/MSE) on the [0,1] scale, averaged over frames;
    frames with MSE < 1e-10 are capped at 100 dB."""
    a01, b01 = _check_pair(a, b)
    mse = ((a01 - b01) ** 2).mean(axis=(1, 2, 3))
    vals = np.where(mse < 1e-10, PSNR_CAP, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)))
    vals = np.minimum(vals, PSNR_CAP)
    return float(vals.mean())


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _luma(frame01: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA_WEIGHTS, frame01, axes=(0, 0))


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable correlation, cropped to the fully-covered region."""
    half = len(window) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over frames, on luminance."""
    a01, b01 = _check_pair(a, b)
    F, C, H, W = a01.shape
    if H < window_size or W < window_size:
        raise ShapeError(f"frames {H}x{W} smaller than the {window_size}x{window_size} window")
    win = _gaussian_window(window_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2          # data range is 1.0
    vals = []
    for f in range(F):
        x = _luma(a01[f])
        y = _luma(b01[f])
        mx = _window_means(x, win)
        my = _window_means(y, win)
        mxx = _window_means(x * x, win)
        myy = _window_means(y * y, win)
        mxy = _window_means(x * y, win)
        vx = mxx - mx ** 2
        vy = myy - my ** 2
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def ssim_luma_only(mean_a: float, mean_b: float, k1: float = 0.01) -> float:
    """Closed-form SSIM of two constant images: only the luminance term."""
    c1 = k1 ** 2
    return (2 * mean_a * mean_b + c1) / (mean_a ** 2 + mean_b ** 2 + c1)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    schema_version: int = REPORT_SCHEMA
    config_hash: str = ""
    seed: int = 0
    per_video: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def add(self, video_id: str, category: str, psnr_db: float, ssim_val: float,
            lpips_val: float | None = None):
        if not -1.0 - 1e-9 <= ssim_val <= 1.0 + 1e-9:
            raise ShapeError(f"ssim {ssim_val} outside [-1, 1]")
        entry = {"id": video_id, "category": category,
                 "psnr": float(psnr_db), "ssim": float(ssim_val)}
        if lpips_val is not None:
            entry["lpips"] = float(lpips_val)
        self.per_video.append(entry)

    def finalize(self):
        cats = sorted({e["category"] for e in self.per_video})
        agg = {}
        for cat in cats + ["all"]:
            sel = [e for e in self.per_video if cat == "all" or e["category"] == cat]
            if not sel:
                continue
            block = {}
            for key in ("psnr", "ssim", "lpips"):
                vals = np.array([e[key] for e in sel if key in e])
                if len(vals):
                    block[key] = {"mean": float(vals.mean()),
                                  "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals)))
                                  if len(vals) > 1 else 0.0,
                                  "n": int(len(vals))}
            agg[cat] = block
        self.aggregates = agg
        return self

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "per_video": self.per_video,
            "aggregates": self.aggregates,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        try:
            raw = json.loads(text)
            rep = MetricReport(schema_version=raw["schema_version"],
                               config_hash=raw["config_hash"], seed=raw["seed"],
                               per_video=raw["per_video"], aggregates=raw["aggregates"])
        except (KeyError, ValueError) as e:
            raise IOFailure(f"malformed metric report: {e}") from e
        if rep.schema_version != REPORT_SCHEMA:
            raise IOFailure(f"unsupported report schema {rep.schema_version}")
        return rep

    def save(self, path: str | Path):
        try:
            Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        except OSError as e:
            raise IOFailure(f"cannot write report {path}: {e}") from e

    @staticmethod
    def load(path: str | Path) -> "MetricReport":
        try:
            return MetricReport.from_json(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise IOFailure(f"cannot read report {path}: {e}") from e


def evaluate_videos(pairs, config_hash: str = "", seed: int = 0,
                    lpips_fn: Callable | None = None) -> MetricReport:
    """pairs: iterable of (video_id, category, prediction, ground_truth)."""
    rep = MetricReport(config_hash=config_hash, seed=seed)
    for vid, cat, pred, gt in pairs:
        lp = None if lpips_fn is None else float(lpips_fn(pred, gt))
        rep.add(vid, cat, psnr(pred, gt), ssim(pred, gt), lp)
    return rep.finalize()
