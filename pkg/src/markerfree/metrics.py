"""Image quality metrics on the 8-bit intensity scale.

PSNR/SSIM/MSE over whole images and over marker-box regions only. Inputs
are float arrays in [0, 1]; every metric multiplies by 255 first so the
reported magnitudes follow the usual 8-bit conventions. Aggregation is
mean and population standard deviation of per-image values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from .data import DatasetIndex, load_sample

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PEAK = 255.0


class MetricsError(ValueError):
    pass


def _check_pair(a, b):
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b):
    """Mean squared error on the 0..255 scale."""
    _check_pair(a, b)
    diff = PEAK * (a.astype(np.float64) - b.astype(np.float64))
    return float(np.mean(diff * diff))


def psnr(a, b, peak=PEAK, cap_db=PSNR_CAP_DB):
    """10 log10(peak^2 / mse); identical images return the cap."""
    err = mse(a, b)
    if err == 0.0:
        return cap_db
    return min(cap_db, 10.0 * math.log10(peak * peak / err))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, window):
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_x = correlate2d(x, window, mode="valid")
    mu_y = correlate2d(y, window, mode="valid")
    sigma_x = correlate2d(x * x, window, mode="valid") - mu_x * mu_x
    sigma_y = correlate2d(y * y, window, mode="valid") - mu_y * mu_y
    sigma_xy = correlate2d(x * y, window, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Mean local SSIM over valid 11x11 Gaussian windows, channel-averaged."""
    _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricsError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    x = PEAK * a.astype(np.float64)
    y = PEAK * b.astype(np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    window = _gaussian_window()
    vals = [_ssim_channel(x[:, :, c], y[:, :, c], window) for c in range(x.shape[2])]
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricRow:
    psnr_db: float
    ssim: float
    mse: float

    def as_dict(self):
        return {"psnr_db": self.psnr_db, "ssim": self.ssim, "mse": self.mse}


def full_metrics(a, b):
    return MetricRow(psnr_db=psnr(a, b), ssim=ssim(a, b), mse=mse(a, b))


def _pad_to_window(crop):
    ph = max(0, SSIM_WINDOW - crop.shape[0])
    pw = max(0, SSIM_WINDOW - crop.shape[1])
    if ph == 0 and pw == 0:
        return crop
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (crop.ndim - 2)
    return np.pad(crop, pad, mode="edge")


def masked_metrics(a, b, boxes):
    """Metrics restricted to marker regions.

    MSE/PSNR run over the union of box-interior pixels; SSIM runs per box
    crop (edge-padded up to the window size when a box is smaller) and is
    averaged over boxes.
    """
    _check_pair(a, b)
    if not boxes:
        raise MetricsError("masked metrics need at least one box")
    h, w = a.shape[0], a.shape[1]
    union = np.zeros((h, w), dtype=bool)
    ssim_vals = []
    for ann in boxes:
        x, y, bw, bh = ann.bbox
        if x < 0 or y < 0 or bw <= 0 or bh <= 0 or x + bw > w or y + bh > h:
            raise MetricsError(f"box {(x, y, bw, bh)} falls outside the {h}x{w} image")
        union[y : y + bh, x : x + bw] = True
        crop_a = _pad_to_window(a[y : y + bh, x : x + bw])
        crop_b = _pad_to_window(b[y : y + bh, x : x + bw])
        ssim_vals.append(ssim(crop_a, crop_b))

    diff = PEAK * (a.astype(np.float64)[union] - b.astype(np.float64)[union])
    masked_mse = float(np.mean(diff * diff))
    if masked_mse == 0.0:
        masked_psnr = PSNR_CAP_DB
    else:
        masked_psnr = min(PSNR_CAP_DB, 10.0 * math.log10(PEAK * PEAK / masked_mse))
    return MetricRow(
        psnr_db=masked_psnr, ssim=float(np.mean(ssim_vals)), mse=masked_mse
    )


def _aggregate(rows):
    out = {}
    for key in ("psnr_db", "ssim", "mse"):
        vals = np.array([getattr(r, key) for r in rows], dtype=np.float64)
        if vals.size == 0:
            out[key] = {"mean": float("nan"), "sd": float("nan")}
        else:
            out[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=0))}
    return out


@dataclass
class MetricsReport:
    """Per-image metric rows for the model output and for the uncorrected
    corrupted input (the do-nothing baseline), plus mean +/- sd."""

    scope: str  # "full" or "mask_only"
    rows: list
    baseline_rows: list

    def aggregates(self):
        return {"model": _aggregate(self.rows), "baseline": _aggregate(self.baseline_rows)}

    def to_json_dict(self):
        return {
            "scope": self.scope,
            "num_images": len(self.rows),
            "aggregates": self.aggregates(),
        }


def evaluate(reconstruct, index: DatasetIndex, policy=None, epoch_seed=0):
    """Score a reconstruction function over a dataset.

    reconstruct maps a CorruptedSample to an image in [0, 1]; rows compare
    it (and the corrupted input, as baseline) against the clean target.
    Samples without marker boxes are skipped in the mask_only scope.
    """
    full_rows, full_base = [], []
    mask_rows, mask_base = [], []
    for i in range(len(index)):
        sample = load_sample(index, i, policy=policy, epoch_seed=epoch_seed)
        restored = np.asarray(reconstruct(sample), dtype=np.float32)
        if restored.shape != sample.clean.shape:
            raise MetricsError(
                f"reconstruction shape {restored.shape} does not match clean "
                f"target {sample.clean.shape} for sample {i}"
            )
        full_rows.append(full_metrics(restored, sample.clean))
        full_base.append(full_metrics(sample.corrupted, sample.clean))
        if sample.boxes:
            mask_rows.append(masked_metrics(restored, sample.clean, sample.boxes))
            mask_base.append(
                masked_metrics(sample.corrupted, sample.clean, sample.boxes)
            )
    return (
        MetricsReport(scope="full", rows=full_rows, baseline_rows=full_base),
        MetricsReport(scope="mask_only", rows=mask_rows, baseline_rows=mask_base),
    )


def write_reports(reports, out_dir):
    """Emit per_image.csv and summary.json for a list of MetricsReports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "per_image.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scope", "index", "role", "psnr_db", "ssim", "mse"])
        for report in reports:
            for role, rows in (("model", report.rows), ("baseline", report.baseline_rows)):
                for i, row in enumerate(rows):
                    writer.writerow(
                        [
                            report.scope,
                            i,
                            role,
                            repr(row.psnr_db),
                            repr(row.ssim),
                            repr(row.mse),
                        ]
                    )
    summary_path = out / "summary.json"
    summary = {r.scope: r.to_json_dict() for r in reports}
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, summary_path
