"""Evaluation protocol: percentile normalization and paired quality metrics.

Volumes under comparison are first rescaled by :func:`percentile_normalize`
(each with its own percentiles, making every metric invariant to affine
intensity transforms of the inputs), then scored with NRMSE, PSNR, SSIM and
Pearson correlation.  Every metric is reported twice: over all voxels and
restricted to the foreground, defined as the voxels where the normalized
ground truth is positive.

SSIM uses the canonical constants (Gaussian window sigma 1.5 with 11^3
support, K1=0.01, K2=0.03) with symmetric edge padding and a full-size map;
the masked variant averages that map over the mask only.  The dynamic range
is shared between both inputs (taken from the ground truth by default) so
the score is symmetric in its arguments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .volume import FftConvolver, Psf, Volume, VolumeError

DEFAULT_P_LOW = 0.1
DEFAULT_P_HIGH = 99.9

SSIM_SIGMA = 1.5
SSIM_SUPPORT = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRIC_NAMES = ("nrmse", "psnr", "ssim", "cc")
CSV_HEADER = ("sample_id", "method", "metric", "scope", "value")


def _asarray(vol) -> np.ndarray:
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    return data.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# normalization and masking
# ---------------------------------------------------------------------------

def percentile_normalize(vol, p_low: float = DEFAULT_P_LOW,
                         p_high: float = DEFAULT_P_HIGH) -> Volume:
    """Affine rescale by the (p_low, p_high) intensity percentiles.

    Percentiles are computed over all voxels with linear interpolation; the
    output is (v - P(p_low)) / (P(p_high) - P(p_low)), not clipped.

    Raises:
        VolumeError: if the two percentiles coincide (constant image) or the
            percentile order is invalid.
    """
    if not (0.0 <= p_low < p_high <= 100.0):
        raise VolumeError(f"need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})")
    data = _asarray(vol)
    lo, hi = np.percentile(data, [p_low, p_high])
    if hi <= lo:
        raise VolumeError("degenerate normalization: percentiles coincide")
    return Volume((data - lo) / (hi - lo))


def foreground_mask(gt_normalized) -> np.ndarray:
    """Boolean mask of voxels where the normalized ground truth is > 0."""
    return _asarray(gt_normalized) > 0.0


def _paired(result, gt, mask) -> tuple:
    r = _asarray(result)
    g = _asarray(gt)
    if r.shape != g.shape:
        raise VolumeError(f"shape mismatch: {r.shape} vs {g.shape}")
    if mask is None:
        return r.ravel(), g.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != g.shape:
        raise VolumeError(f"mask shape {mask.shape} does not match {g.shape}")
    if not mask.any():
        raise VolumeError("empty evaluation mask")
    return r[mask], g[mask]


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def nrmse(result, gt, mask=None) -> float:
    """Root-mean-square error over the ground truth's value range."""
    r, g = _paired(result, gt, mask)
    value_range = float(g.max()) - float(g.min())
    if value_range == 0.0:
        raise VolumeError("ground truth has zero dynamic range")
    rmse = math.sqrt(float(np.mean((r - g) ** 2)))
    return rmse / value_range


def psnr(result, gt, mask=None) -> float:
    """20*log10(peak/rmse) with peak = max of the evaluated ground truth.

    Identical inputs return +inf as a sentinel.
    """
    r, g = _paired(result, gt, mask)
    peak = float(g.max())
    if peak <= 0.0:
        raise VolumeError("ground truth peak must be positive")
    rmse = math.sqrt(float(np.mean((r - g) ** 2)))
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def cc(result, gt, mask=None) -> float:
    """Pearson correlation coefficient over the evaluated voxels."""
    r, g = _paired(result, gt, mask)
    r = r - r.mean()
    g = g - g.mean()
    rr = float((r * r).sum())
    gg = float((g * g).sum())
    if rr == 0.0 or gg == 0.0:
        raise VolumeError("zero-variance input for correlation")
    return float((r * g).sum()) / math.sqrt(rr * gg)


def _ssim_window() -> Psf:
    t = np.arange(SSIM_SUPPORT, dtype=np.float64) - (SSIM_SUPPORT - 1) / 2
    w = np.exp(-(t ** 2) / (2.0 * SSIM_SIGMA ** 2))
    w /= w.sum()
    kernel = w[:, None, None] * w[None, :, None] * w[None, None, :]
    return Psf.from_array(kernel, normalize=True)


def ssim_map(result, gt, data_range: float) -> np.ndarray:
    """Full-size local SSIM map with symmetric edge padding."""
    a = _asarray(result)
    b = _asarray(gt)
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0.0:
        raise VolumeError("data_range must be positive")
    radius = (SSIM_SUPPORT - 1) // 2
    pad_a = np.pad(a, radius, mode="symmetric")
    pad_b = np.pad(b, radius, mode="symmetric")
    # A circular FFT product on the padded grid never wraps into the crop
    # region, so this equals direct windowed sums with symmetric padding.
    conv = FftConvolver(_ssim_window(), pad_a.shape)
    crop = tuple(slice(radius, radius + n) for n in a.shape)
    mu_a = conv.convolve(pad_a)[crop]
    mu_b = conv.convolve(pad_b)[crop]
    var_a = conv.convolve(pad_a * pad_a)[crop] - mu_a * mu_a
    var_b = conv.convolve(pad_b * pad_b)[crop] - mu_b * mu_b
    cov = conv.convolve(pad_a * pad_b)[crop] - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )


def ssim(result, gt, mask=None, data_range: float | None = None) -> float:
    """Mean local SSIM; masked variants average the map over the mask."""
    g = _asarray(gt)
    if data_range is None:
        data_range = float(g.max()) - float(g.min())
        if data_range <= 0.0:
            raise VolumeError("ground truth has zero dynamic range")
    smap = ssim_map(result, gt, data_range)
    if mask is None:
        return float(smap.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != smap.shape:
        raise VolumeError(f"mask shape {mask.shape} does not match {smap.shape}")
    if not mask.any():
        raise VolumeError("empty evaluation mask")
    return float(smap[mask].mean())


# ---------------------------------------------------------------------------
# paired reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    """All-voxel / foreground-only value pairs for the four metrics."""

    nrmse: tuple
    psnr: tuple
    ssim: tuple
    cc: tuple
    foreground_count: int
    normalization: tuple

    def values(self) -> dict:
        return {
            "nrmse": self.nrmse,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "cc": self.cc,
        }

    def rows(self, sample_id: str, method: str) -> list:
        out = []
        for metric, (all_v, fg_v) in self.values().items():
            out.append((sample_id, method, metric, "all", all_v))
            out.append((sample_id, method, metric, "fg", fg_v))
        return out


def evaluate_report(result, gt, p_low: float = DEFAULT_P_LOW,
                    p_high: float = DEFAULT_P_HIGH) -> MetricReport:
    """Normalize both inputs and score them over all voxels and foreground."""
    result_n = percentile_normalize(result, p_low, p_high)
    gt_n = percentile_normalize(gt, p_low, p_high)
    mask = foreground_mask(gt_n)
    return MetricReport(
        nrmse=(nrmse(result_n, gt_n), nrmse(result_n, gt_n, mask)),
        psnr=(psnr(result_n, gt_n), psnr(result_n, gt_n, mask)),
        ssim=(ssim(result_n, gt_n), ssim(result_n, gt_n, mask)),
        cc=(cc(result_n, gt_n), cc(result_n, gt_n, mask)),
        foreground_count=int(mask.sum()),
        normalization=(p_low, p_high),
    )


def _mean_report(reports: list, p_low: float, p_high: float) -> MetricReport:
    def mean_pair(pairs):
        return (float(np.mean([p[0] for p in pairs])),
                float(np.mean([p[1] for p in pairs])))

    return MetricReport(
        nrmse=mean_pair([r.nrmse for r in reports]),
        psnr=mean_pair([r.psnr for r in reports]),
        ssim=mean_pair([r.ssim for r in reports]),
        cc=mean_pair([r.cc for r in reports]),
        foreground_count=int(round(np.mean([r.foreground_count for r in reports]))),
        normalization=(p_low, p_high),
    )


# ---------------------------------------------------------------------------
# run evaluation
# ---------------------------------------------------------------------------

def evaluate_run(results_dir, manifest, p_low: float = DEFAULT_P_LOW,
                 p_high: float = DEFAULT_P_HIGH, split: str = "test",
                 include_raw: bool = True) -> dict:
    """Score every method output found under ``results_dir``.

    ``results_dir`` holds one subdirectory per method containing
    ``<sample_id>.mvv`` files.  The pseudo-method "raw" (the 0 degree input
    view straight from the dataset) is added unless a subdirectory of that
    name exists or ``include_raw`` is false.  Missing files are collected as
    warnings, not errors; the run fails only if nothing is evaluable.

    Returns:
        dict with "reports" (method -> sample_id -> MetricReport), "mean"
        (method -> MetricReport), "rows" (CSV rows, means last under
        sample_id "mean"), "missing" (list of paths), and "samples" (the
        evaluated sample ids).
    """
    if not isinstance(manifest, dict):
        manifest = io.read_manifest(manifest)
    if split not in manifest["split"]:
        raise VolumeError(f"unknown split {split!r}")
    sample_ids = list(manifest["split"][split])

    methods = {}
    results_dir = Path(results_dir)
    if results_dir.is_dir():
        for child in sorted(results_dir.iterdir()):
            if child.is_dir():
                methods[child.name] = child

    reports: dict = {}
    missing: list = []
    rows: list = []
    method_names = (["raw"] if include_raw and "raw" not in methods else [])
    method_names += sorted(methods)

    for sid in sample_ids:
        sample = io.manifest_sample(manifest, sid)
        gt = io.read_volume(io.resolve(manifest, sample["gt"]))
        for method in method_names:
            if method == "raw" and method not in methods:
                angles = sample["angles"]
                view_idx = angles.index(0) if 0 in angles else 0
                path = io.resolve(manifest, sample["views"][view_idx])
            else:
                path = methods[method] / f"{sid}.mvv"
            if not Path(path).exists():
                missing.append(str(path))
                continue
            result = io.read_volume(path)
            report = evaluate_report(result, gt, p_low, p_high)
            reports.setdefault(method, {})[sid] = report
            rows.extend(report.rows(sid, method))

    if not reports:
        raise FileNotFoundError(
            f"no evaluable samples for split {split!r} under {results_dir}"
        )
    means = {}
    for method, by_sample in sorted(reports.items()):
        means[method] = _mean_report(list(by_sample.values()), p_low, p_high)
        rows.extend(means[method].rows("mean", method))
    return {
        "reports": reports,
        "mean": means,
        "rows": rows,
        "missing": missing,
        "samples": sample_ids,
    }


# ---------------------------------------------------------------------------
# table output
# ---------------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_metrics_csv(path, rows):
    """Write (sample_id, method, metric, scope, value) rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sample_id, method, metric, scope, value in rows:
            writer.writerow([sample_id, method, metric, scope, repr(float(value))])


def write_metrics_json(path, evaluation: dict, config_echo: dict | None = None):
    """JSON mirror of the CSV table plus the resolved config."""
    payload = {
        "config": _jsonable(config_echo or {}),
        "missing": list(evaluation["missing"]),
        "samples": evaluation["samples"],
        "mean": {},
        "per_sample": {},
    }
    for method, report in evaluation["mean"].items():
        payload["mean"][method] = _jsonable(report.values())
    for method, by_sample in evaluation["reports"].items():
        payload["per_sample"][method] = {
            sid: _jsonable(r.values()) for sid, r in sorted(by_sample.items())
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
