"""Classical multi-view fusion baselines.

Two methods operate on a registered :class:`~mvfuse.volume.ViewSet`:

* Content-based fusion: a per-voxel weighted average of the views where each
  weight is the local Shannon entropy of the view, so locally structured
  regions dominate locally flat (blurred) ones.
* Multi-view Richardson-Lucy deconvolution with optional Tikhonov intensity
  regularization.  One iteration sweeps the views in order and applies one
  multiplicative update per view:

      ratio = x_v / max(psi * h_v, clamp_floor)
      psi  <- psi . correlate(ratio, h_v)

  followed by the regularization step psi <- (sqrt(1 + 2 l psi) - 1) / l
  once per sweep.  The estimate stays non-negative throughout and, for a
  single view with normalized kernel and circular boundary, conserves flux.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .volume import (
    BOUNDARY_CIRCULAR,
    FftConvolver,
    ViewSet,
    Volume,
    VolumeError,
)

INIT_AVERAGE = "average-of-views"
INIT_UNIFORM = "uniform"


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CbifConfig:
    """Content-based fusion settings.

    ``window_radius`` is the half-width of the cubic entropy window,
    ``histogram_bins`` the number of equal-width intensity bins over the
    volume's global range, and ``epsilon`` a floor added to every weight so
    that fully flat regions still average instead of dividing by zero.
    """

    window_radius: int = 4
    histogram_bins: int = 64
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.window_radius < 1:
            raise ConfigError("window_radius must be >= 1")
        if self.histogram_bins < 2:
            raise ConfigError("histogram_bins must be >= 2")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


@dataclass(frozen=True)
class EbmdConfig:
    """Multi-view Richardson-Lucy settings.

    ``iterations`` counts full sweeps over the views.  ``tikhonov_lambda``
    scales the per-sweep intensity regularization (0 disables it).  ``init``
    selects the starting estimate: the voxelwise mean of the views or a
    flux-matched constant.  ``clamp_floor`` bounds the ratio denominator away
    from zero (zero-background phantoms guarantee zero denominators).
    """

    iterations: int = 48
    tikhonov_lambda: float = 0.004
    init: str = INIT_AVERAGE
    clamp_floor: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.tikhonov_lambda < 0:
            raise ConfigError("tikhonov_lambda must be >= 0")
        if self.init not in (INIT_AVERAGE, INIT_UNIFORM):
            raise ConfigError(
                f"init must be {INIT_AVERAGE!r} or {INIT_UNIFORM!r}, got {self.init!r}"
            )
        if self.clamp_floor <= 0:
            raise ConfigError("clamp_floor must be > 0")


# ---------------------------------------------------------------------------
# local entropy and content-based fusion
# ---------------------------------------------------------------------------

def _sliding_sum(arr: np.ndarray, width: int, axis: int) -> np.ndarray:
    """Sum over length-``width`` windows along ``axis`` (valid mode)."""
    cs = np.cumsum(arr, axis=axis)
    lead = [slice(None)] * arr.ndim
    lead[axis] = slice(0, 1)
    cs = np.concatenate([np.zeros_like(cs[tuple(lead)]), cs], axis=axis)
    hi = [slice(None)] * arr.ndim
    lo = [slice(None)] * arr.ndim
    hi[axis] = slice(width, None)
    lo[axis] = slice(0, cs.shape[axis] - width)
    return cs[tuple(hi)] - cs[tuple(lo)]


def _box_count(indicator: np.ndarray, width: int) -> np.ndarray:
    for axis in range(3):
        indicator = _sliding_sum(indicator, width, axis)
    return indicator


def local_entropy(vol: Volume, cfg: CbifConfig) -> Volume:
    """Per-voxel Shannon entropy (nats) of windowed intensity histograms.

    Histograms use ``cfg.histogram_bins`` equal-width bins spanning the
    volume's global [min, max]; each voxel's histogram is taken over the
    cubic window of radius ``cfg.window_radius`` around it, with the volume
    zero-padded at the borders (padded and out-of-range values land in the
    end bins).

    Returns:
        Non-negative entropy map with the volume's dims.  A constant volume
        yields an all-zero map.
    """
    data = vol.data.astype(np.float64, copy=False)
    if not np.all(np.isfinite(data)):
        raise VolumeError("volume contains NaN/Inf")
    vmin = float(data.min())
    vmax = float(data.max())
    if vmax <= vmin:
        return Volume.zeros(vol.dims)
    bins = cfg.histogram_bins
    idx = np.floor((data - vmin) / (vmax - vmin) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    zero_bin = min(max(int(math.floor((0.0 - vmin) / (vmax - vmin) * bins)), 0), bins - 1)
    radius = cfg.window_radius
    padded = np.pad(idx, radius, mode="constant", constant_values=zero_bin)
    width = 2 * radius + 1
    window_size = float(width ** 3)
    entropy = np.zeros(vol.dims, dtype=np.float64)
    for b in range(bins):
        counts = _box_count((padded == b).astype(np.float64), width)
        present = counts > 0
        if present.any():
            p = counts[present] / window_size
            entropy[present] -= p * np.log(p)
    return Volume(entropy)


def cbif_fuse(views: ViewSet, cfg: CbifConfig | None = None) -> Volume:
    """Entropy-weighted average of the input views.

    Each view contributes with weight ``local_entropy(view) + epsilon``, so
    the output lies voxelwise within the convex hull of the views.
    """
    cfg = cfg or CbifConfig()
    if views.n_views < 2:
        raise VolumeError("fusion needs at least 2 views")
    weights = [local_entropy(v, cfg).data for v in views.views]
    num = np.zeros(views.dims, dtype=np.float64)
    den = np.zeros(views.dims, dtype=np.float64)
    for view, weight in zip(views.views, weights):
        num += (weight + cfg.epsilon) * view.data
        den += weight + cfg.epsilon
    return Volume(num / den)


# ---------------------------------------------------------------------------
# multi-view Richardson-Lucy
# ---------------------------------------------------------------------------

def tikhonov_step(psi: np.ndarray, lam: float) -> np.ndarray:
    """Intensity regularization psi <- (sqrt(1 + 2*lam*psi) - 1) / lam.

    Evaluated in the cancellation-free form 2*psi / (sqrt(1 + 2*lam*psi) + 1),
    which is algebraically identical, reduces to the identity as lam -> 0,
    and shrinks intensities for lam > 0.
    """
    if lam == 0:
        return psi
    return 2.0 * psi / (np.sqrt(1.0 + 2.0 * lam * psi) + 1.0)


def ebmd_deconvolve(views: ViewSet, cfg: EbmdConfig | None = None,
                    progress_sink=None,
                    boundary: str = BOUNDARY_CIRCULAR) -> Volume:
    """Multi-view Richardson-Lucy deconvolution.

    Args:
        views: Non-negative registered views with normalized kernels.
        cfg: Iteration count, regularization, init and clamping settings.
        progress_sink: Optional callable(iteration, residuals, psi) invoked
            after each sweep with the 1-based iteration index, the per-view
            L1 residuals ``sum |psi*h_v - x_v|`` measured at the start of
            each view update, and the current estimate.
        boundary: Convolution boundary handling.

    Returns:
        The deconvolved volume (non-negative, float64).

    Raises:
        VolumeError: on invalid inputs, unnormalized kernels, or if the
            estimate stops being finite (message carries the iteration).
    """
    cfg = cfg or EbmdConfig()
    for i, (view, psf) in enumerate(zip(views.views, views.psfs)):
        view.assert_physical(f"view {i}")
        if not psf.normalized:
            raise VolumeError(f"psf {i} is not normalized (sum {psf.data.sum()!r})")

    data = [v.data.astype(np.float64, copy=False) for v in views.views]
    convolvers = [FftConvolver(p, views.dims, boundary) for p in views.psfs]
    if cfg.init == INIT_AVERAGE:
        psi = np.mean(data, axis=0)
    else:
        psi = np.full(views.dims, float(np.mean(data)))

    for iteration in range(1, cfg.iterations + 1):
        residuals = []
        for x, conv in zip(data, convolvers):
            estimate = conv.convolve(psi)
            residuals.append(float(np.abs(estimate - x).sum()))
            ratio = x / np.maximum(estimate, cfg.clamp_floor)
            psi = psi * conv.correlate(ratio)
            np.clip(psi, 0.0, None, out=psi)
        if cfg.tikhonov_lambda > 0:
            psi = tikhonov_step(psi, cfg.tikhonov_lambda)
        if not np.all(np.isfinite(psi)):
            raise VolumeError(f"estimate became non-finite at iteration {iteration}")
        if progress_sink is not None:
            progress_sink(iteration, residuals, Volume(psi))
    return Volume(psi)
