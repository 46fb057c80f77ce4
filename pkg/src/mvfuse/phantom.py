"""Synthetic phantoms, anisotropic PSFs, and degraded multi-view datasets.

Two phantom families are provided.  The ``embryo`` kind places ellipsoidal
nuclei with Gaussian intensity falloff on a jittered spherical shell, giving a
dense hollow cluster; the ``nuclei`` kind scatters them uniformly with a
minimum-distance rejection rule so objects rarely touch.  Background voxels
are exactly zero in both cases.

Views are degraded according to the forward model

    x_v = clamp>=0( poisson( convolve(z, h_v) ) + gaussian )

where ``h_v`` is an axially elongated Gaussian kernel rotated by the view
angle about +y.  With all noise terms disabled the view equals the
convolution exactly, which is the consistency the fusion methods exploit.

Datasets are written as one directory per sample (ground truth plus one file
per view, MVV1 format) together with a JSON manifest carrying sample ids,
seeds, file paths, configs, and the train/val/test split.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from . import io
from .config import ConfigError, as_dict
from .volume import (
    BOUNDARY_CIRCULAR,
    Psf,
    Volume,
    convolve,
    rotate_y_90,
)

# Maximum placement attempts per object before giving up.
MAX_PLACEMENT_ATTEMPTS = 10_000

# Intensity falloff rate inside an object: value = I * exp(-FALLOFF * d^2)
# with d the normalized ellipsoidal radius.  At the boundary (d = 1) the
# profile has decayed to exp(-4) ~ 1.8% of peak, so truncating to exact zero
# outside the ellipsoid leaves only a small step.
FALLOFF = 4.0

# Analytic kernel tail mass above this fraction records a truncation warning.
TAIL_MASS_WARN = 0.01

KIND_EMBRYO = "embryo"
KIND_NUCLEI = "nuclei"

# Shell radius jitter, as a fraction of the nominal shell radius.  Kept well
# inside the +-0.1 half-extent band that center positions are checked against.
_SHELL_JITTER = 0.05


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomConfig:
    """Latent image generator settings.

    Args:
        kind: "embryo" (shell of nuclei) or "nuclei" (sparse blobs).
        dims: Volume size in voxels (nx, ny, nz).
        n_objects: Number of nuclei to place.
        radius_range: Per-axis object radius bounds in voxels, min >= 1.
        shell_radius_frac: Shell radius as a fraction of the volume
            half-extent (embryo kind only).
        intensity_range: Peak intensity bounds, within (0, 1].
        seed: 64-bit RNG seed.
    """

    kind: str = KIND_EMBRYO
    dims: tuple = (64, 64, 64)
    n_objects: int = 60
    radius_range: tuple = (2.0, 4.0)
    shell_radius_frac: float = 0.65
    intensity_range: tuple = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (KIND_EMBRYO, KIND_NUCLEI):
            raise ConfigError(f"kind must be 'embryo' or 'nuclei', got {self.kind!r}")
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ConfigError(f"dims must be three positive ints, got {self.dims}")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        rmin, rmax = self.radius_range
        if not (1.0 <= rmin <= rmax):
            raise ConfigError(f"radius_range must satisfy 1 <= min <= max, got {self.radius_range}")
        if not (0.0 < self.shell_radius_frac < 1.0):
            raise ConfigError("shell_radius_frac must lie in (0, 1)")
        imin, imax = self.intensity_range
        if not (0.0 < imin <= imax <= 1.0):
            raise ConfigError(f"intensity_range must lie within (0, 1], got {self.intensity_range}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass(frozen=True)
class NoiseConfig:
    """Degradation noise settings.

    ``poisson_photons`` is the expected photon count at intensity 1.0; zero
    disables shot noise.  ``gaussian_sigma`` is the additive readout noise
    level in intensity units; zero disables it.
    """

    gaussian_sigma: float = 0.01
    poisson_photons: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        if self.poisson_photons < 0:
            raise ConfigError("poisson_photons must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def enabled(self) -> bool:
        return self.gaussian_sigma > 0 or self.poisson_photons > 0


@dataclass(frozen=True)
class PsfConfig:
    """Anisotropic Gaussian kernel settings.

    The kernel is sharp laterally (x, y) and elongated axially (z, before
    any view rotation), so each rotated view blurs along a view-dependent
    direction.
    """

    dims: tuple = (15, 15, 15)
    sigma_lateral: float = 1.0
    sigma_axial: float = 3.0

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 or int(n) % 2 == 0 for n in self.dims):
            raise ConfigError(f"psf dims must be three odd positive ints, got {self.dims}")
        if not (self.sigma_axial >= self.sigma_lateral > 0):
            raise ConfigError(
                f"need sigma_axial >= sigma_lateral > 0, got "
                f"({self.sigma_lateral}, {self.sigma_axial})"
            )


@dataclass(frozen=True)
class PhantomInfo:
    """Placement log for a generated phantom: one row per object."""

    centers: np.ndarray      # (n, 3) voxel coordinates
    radii: np.ndarray        # (n, 3) per-axis radii
    intensities: np.ndarray  # (n,)


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

def generate_phantom_info(cfg: PhantomConfig) -> tuple:
    """Generate a latent volume plus the placement log.

    Returns:
        (Volume, PhantomInfo) where the volume is float64, non-negative, and
        exactly zero outside all objects.
    """
    rng = np.random.default_rng(cfg.seed)
    dims = tuple(int(n) for n in cfg.dims)
    if cfg.kind == KIND_EMBRYO:
        centers = _place_on_shell(rng, dims, cfg)
    else:
        centers = _place_scattered(rng, dims, cfg)
    n = cfg.n_objects
    radii = rng.uniform(cfg.radius_range[0], cfg.radius_range[1], size=(n, 3))
    intensities = rng.uniform(cfg.intensity_range[0], cfg.intensity_range[1], size=n)
    data = _render_objects(dims, centers, radii, intensities)
    info = PhantomInfo(centers=centers, radii=radii, intensities=intensities)
    return Volume(data), info


def generate_phantom(cfg: PhantomConfig) -> Volume:
    """Generate a latent volume (see :func:`generate_phantom_info`)."""
    vol, _ = generate_phantom_info(cfg)
    return vol


def _place_on_shell(rng: np.random.Generator, dims: tuple, cfg: PhantomConfig) -> np.ndarray:
    """Centers on a jittered spherical shell around the volume center."""
    half_extent = min(dims) / 2.0
    mid = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    centers = np.empty((cfg.n_objects, 3), dtype=np.float64)
    for i in range(cfg.n_objects):
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        while norm < 1e-9:
            direction = rng.normal(size=3)
            norm = np.linalg.norm(direction)
        jitter = 1.0 + rng.uniform(-_SHELL_JITTER, _SHELL_JITTER)
        radius = cfg.shell_radius_frac * half_extent * jitter
        centers[i] = mid + direction / norm * radius
    return centers


def _place_scattered(rng: np.random.Generator, dims: tuple, cfg: PhantomConfig) -> np.ndarray:
    """Uniform centers with pairwise distance >= 2 * radius_range.max."""
    min_dist = 2.0 * cfg.radius_range[1]
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    centers: list = []
    for _ in range(cfg.n_objects):
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            cand = rng.uniform(0.0, 1.0, size=3) * hi
            if all(np.linalg.norm(cand - c) >= min_dist for c in centers):
                centers.append(cand)
                break
        else:
            raise ConfigError(
                f"overcrowded phantom: placed {len(centers)} of {cfg.n_objects} "
                f"objects after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    return np.asarray(centers, dtype=np.float64)


def _render_objects(dims: tuple, centers: np.ndarray, radii: np.ndarray,
                    intensities: np.ndarray) -> np.ndarray:
    """Rasterize ellipsoids with Gaussian falloff; overlaps take the max."""
    data = np.zeros(dims, dtype=np.float64)
    for center, radius, peak in zip(centers, radii, intensities):
        lo = [max(0, math.ceil(center[a] - radius[a])) for a in range(3)]
        hi = [min(dims[a] - 1, math.floor(center[a] + radius[a])) for a in range(3)]
        if any(lo[a] > hi[a] for a in range(3)):
            continue
        axes = [np.arange(lo[a], hi[a] + 1, dtype=np.float64) for a in range(3)]
        d2 = (
            ((axes[0] - center[0]) / radius[0])[:, None, None] ** 2
            + ((axes[1] - center[1]) / radius[1])[None, :, None] ** 2
            + ((axes[2] - center[2]) / radius[2])[None, None, :] ** 2
        )
        patch = np.where(d2 <= 1.0, peak * np.exp(-FALLOFF * d2), 0.0)
        box = data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        np.maximum(box, patch, out=box)
    return data


# ---------------------------------------------------------------------------
# PSF synthesis
# ---------------------------------------------------------------------------

def synthesize_psf(cfg: PsfConfig) -> Psf:
    """Build a normalized anisotropic Gaussian kernel.

    The kernel is point-sampled at integer offsets from the center and
    normalized to unit sum.  If the analytic mass outside the kernel support
    exceeds 1%, a truncation warning is recorded in ``psf.meta`` (the kernel
    is still returned).

    Args:
        cfg: Kernel size and sigmas; sigma order is (lateral, lateral, axial).

    Returns:
        Psf with sum 1 within 1e-9 and meta carrying config plus any warning.
    """
    dims = tuple(int(n) for n in cfg.dims)
    sigmas = (cfg.sigma_lateral, cfg.sigma_lateral, cfg.sigma_axial)
    profiles = []
    for n, sigma in zip(dims, sigmas):
        t = np.arange(n, dtype=np.float64) - (n // 2)
        profiles.append(np.exp(-(t ** 2) / (2.0 * sigma ** 2)))
    kernel = (
        profiles[0][:, None, None]
        * profiles[1][None, :, None]
        * profiles[2][None, None, :]
    )
    kernel /= kernel.sum()

    meta = {"sigma": list(sigmas)}
    coverage = 1.0
    for n, sigma in zip(dims, sigmas):
        coverage *= math.erf((n // 2 + 0.5) / (sigma * math.sqrt(2.0)))
    tail = 1.0 - coverage
    if tail > TAIL_MASS_WARN:
        meta["warning"] = f"kernel truncates {tail * 100.0:.2f}% of analytic mass"
    return Psf.from_array(kernel, normalize=False, meta=meta)


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

def degrade_view(latent: Volume, psf: Psf, noise: NoiseConfig,
                 boundary: str = BOUNDARY_CIRCULAR) -> Volume:
    """Blur a latent volume with a kernel and apply shot plus readout noise.

    With both noise terms disabled the result is the convolution exactly
    (no clamping applied).  Otherwise Poisson rates are clamped to zero
    before sampling and the final volume is clamped to be non-negative.

    Args:
        latent: Non-negative ground-truth volume.
        psf: View kernel.
        noise: Noise settings; ``noise.seed`` fully determines the draw.
        boundary: Convolution boundary handling.

    Returns:
        Degraded view as float64.
    """
    latent.assert_physical()
    blurred = convolve(latent, psf, boundary=boundary)
    if not noise.enabled:
        return blurred
    rng = np.random.default_rng(noise.seed)
    out = blurred.data
    if noise.poisson_photons > 0:
        rates = np.clip(out, 0.0, None) * noise.poisson_photons
        out = rng.poisson(rates).astype(np.float64) / noise.poisson_photons
    if noise.gaussian_sigma > 0:
        out = out + rng.normal(0.0, noise.gaussian_sigma, size=out.shape)
    return Volume(np.clip(out, 0.0, None))


def view_quarter_turns(n_views: int) -> list:
    """Quarter-turn counts per view: quad {0,1,2,3}, two-view {0,2}."""
    if n_views == 4:
        return [0, 1, 2, 3]
    if n_views == 2:
        return [0, 2]
    raise ConfigError(f"n_views must be 2 or 4, got {n_views}")


def view_psfs(base: Psf, n_views: int) -> list:
    """Per-view kernels obtained by rotating the base kernel about +y."""
    return [rotate_y_90(base, q) for q in view_quarter_turns(n_views)]


def _noise_seed(noise_seed: int, sample_index: int, view_index: int) -> int:
    """Independent per-view noise seed; stable under adding samples/views."""
    seq = np.random.SeedSequence([noise_seed ^ sample_index, view_index])
    return int(seq.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def split_sample_ids(kind: str, ids: list) -> dict:
    """Assign train/val/test ids, scaled from the reference splits.

    Embryo datasets use 108/21/11 of 140 proportions.  Nuclei datasets use
    68/12 of 80, where the same held-out ids serve as both validation and
    test set.
    """
    n = len(ids)
    if kind == KIND_EMBRYO:
        n_train = round(n * 108 / 140)
        n_val = round(n * 21 / 140)
        return {
            "train": list(ids[:n_train]),
            "val": list(ids[n_train:n_train + n_val]),
            "test": list(ids[n_train + n_val:]),
        }
    n_train = round(n * 68 / 80)
    held_out = list(ids[n_train:])
    return {"train": list(ids[:n_train]), "val": held_out, "test": list(held_out)}


def make_dataset(phantom_cfg: PhantomConfig, psf_cfg: PsfConfig,
                 noise_cfg: NoiseConfig, n_views: int, n_samples: int,
                 out_dir, force: bool = False,
                 boundary: str = BOUNDARY_CIRCULAR,
                 dtype: str = "f32", progress=None) -> dict:
    """Write a degraded multi-view dataset and its manifest.

    Per sample ``i`` the phantom seed is ``phantom_cfg.seed ^ i`` and each
    view draws noise from an independent stream, so samples can be
    regenerated individually.  Ground truth is quantized to the storage dtype
    before degradation so that, with noise disabled, convolving the stored
    ground truth reproduces each stored view bit-exactly.

    Args:
        phantom_cfg: Latent image settings (kind selects the split rule).
        psf_cfg: Base kernel settings; view v uses the kernel rotated by the
            view quarter-turns about +y.
        noise_cfg: Noise settings shared by all views.
        n_views: 2 or 4.
        n_samples: Number of sample groups to generate.
        out_dir: Output directory; must be empty unless ``force``.
        force: Overwrite into an existing non-empty directory.
        boundary: Convolution boundary handling for the degradation.
        dtype: Storage dtype for volumes, "f32" or "f64".
        progress: Optional callable(sample_index, n_samples).

    Returns:
        The manifest dict, with "_dir" set to the dataset directory.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    turns = view_quarter_turns(n_views)
    out_dir = os.fspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(
            f"output directory {out_dir!r} is not empty (use --force to overwrite)"
        )
    os.makedirs(out_dir, exist_ok=True)

    base_psf = synthesize_psf(psf_cfg)
    angles = [90 * q for q in turns]
    psf_paths = []
    os.makedirs(os.path.join(out_dir, "psfs"), exist_ok=True)
    for q, angle in zip(turns, angles):
        rel = f"psfs/view_{angle:03d}.mvv"
        io.write_psf(os.path.join(out_dir, rel), rotate_y_90(base_psf, q))
        psf_paths.append(rel)

    storage = np.float32 if dtype == "f32" else np.float64
    samples = []
    for idx in range(n_samples):
        sample_id = f"s{idx:04d}"
        sample_dir = os.path.join(out_dir, "samples", sample_id)
        os.makedirs(sample_dir, exist_ok=True)
        phantom_seed = phantom_cfg.seed ^ idx
        latent = generate_phantom(dataclasses.replace(phantom_cfg, seed=phantom_seed))
        # Quantize before degrading: stored views then match convolutions of
        # the stored ground truth exactly in the noise-free case.
        latent = Volume(latent.data.astype(storage).astype(np.float64))
        gt_rel = f"samples/{sample_id}/gt.mvv"
        io.write_volume(os.path.join(out_dir, gt_rel), latent, dtype=dtype)
        view_rels = []
        noise_seeds = []
        for v, (q, angle) in enumerate(zip(turns, angles)):
            seed_v = _noise_seed(noise_cfg.seed, idx, v)
            noise_seeds.append(seed_v)
            view = degrade_view(
                latent,
                rotate_y_90(base_psf, q),
                dataclasses.replace(noise_cfg, seed=seed_v),
                boundary=boundary,
            )
            rel = f"samples/{sample_id}/view_{angle:03d}.mvv"
            io.write_volume(os.path.join(out_dir, rel), view, dtype=dtype)
            view_rels.append(rel)
        samples.append({
            "id": sample_id,
            "gt": gt_rel,
            "views": view_rels,
            "angles": angles,
            "seed": phantom_seed,
            "noise_seeds": noise_seeds,
        })
        if progress is not None:
            progress(idx, n_samples)

    manifest = {
        "samples": samples,
        "split": split_sample_ids(phantom_cfg.kind, [s["id"] for s in samples]),
        "configs": {
            "phantom": as_dict(phantom_cfg),
            "psf": as_dict(psf_cfg),
            "noise": as_dict(noise_cfg),
            "n_views": n_views,
            "boundary": boundary,
            "dtype": dtype,
        },
        "psfs": psf_paths,
    }
    io.write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    manifest["_dir"] = out_dir
    return manifest
