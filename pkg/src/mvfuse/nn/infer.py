"""Tiled inference for trained fusion generators.

Volumes larger than the training tile are processed in overlapping tiles
whose contributions are blended by linear feathering: each tile carries a
separable weight that ramps linearly across the overlap band, accumulated
weights divide the sum at the end.  A single tile covering the whole volume
bypasses the blend entirely and equals the direct forward pass.
"""

from __future__ import annotations

import numpy as np

from ..volume import ViewSet, Volume, VolumeError
from .generator import UNet3D


def _axis_positions(extent: int, tile: int, step: int) -> list[int]:
    positions = list(range(0, extent - tile + 1, step))
    if positions[-1] != extent - tile:
        positions.append(extent - tile)
    return positions


def _feather_profile(tile: int, overlap: int) -> np.ndarray:
    """Per-axis weights: linear ramp of length ``overlap`` at both ends."""

    idx = np.arange(tile, dtype=np.float64)
    return np.minimum(np.minimum(idx + 1.0, tile - idx), overlap + 1.0) / (overlap + 1.0)


def _as_stack(views) -> np.ndarray:
    if isinstance(views, ViewSet):
        return np.stack([v.data for v in views.views])
    arr = np.asarray(views)
    if arr.ndim != 4:
        raise VolumeError(
            f"expected a ViewSet or (n_views, nx, ny, nz) array, got shape "
            f"{arr.shape}"
        )
    return arr


def infer(
    gen: UNet3D,
    views,
    tile_dims=None,
    overlap=None,
    precision: str = "f64",
) -> Volume:
    """Fuse registered views into one volume.

    ``tile_dims=None`` runs the whole volume as a single tile.  ``overlap``
    (voxels per axis, default quarter tile) controls the feathering band.
    ``precision="f32"`` casts parameters and activations to float32.
    """

    if precision not in ("f64", "f32"):
        raise VolumeError(f"precision must be 'f64' or 'f32', got {precision!r}")
    stack = _as_stack(views)
    # Raw views may carry FFT round-off below zero; clamp as training does.
    stack = np.clip(stack.astype(np.float64, copy=False), 0.0, None)
    if stack.shape[0] != gen.cfg.in_channels:
        raise VolumeError(
            f"generator expects {gen.cfg.in_channels} views, got {stack.shape[0]}"
        )
    dims = stack.shape[1:]

    if precision == "f32":
        gen = _cast_generator(gen, np.float32)
        stack = stack.astype(np.float32)

    if tile_dims is None:
        tile = tuple(dims)
    else:
        tile = tuple(int(v) for v in tile_dims)
        if len(tile) != 3:
            raise VolumeError(f"tile_dims must have 3 entries, got {tile_dims}")
    factor = gen.cfg.pool_factor
    for axis, t in zip("xyz", tile):
        if t < factor:
            raise VolumeError(
                f"tile extent {t} on axis {axis} below the receptive-field "
                f"minimum {factor}"
            )
    for axis, (t, n) in enumerate(zip(tile, dims)):
        if t > n:
            raise VolumeError(
                f"tile extent {t} exceeds volume extent {n} on axis "
                f"{'xyz'[axis]}"
            )
    gen.validate_dims(tile)

    if tuple(tile) == tuple(dims):
        out = gen.forward(stack, record=False)[0]
        return Volume(np.clip(out, 0.0, None))

    if overlap is None:
        ovl = tuple(t // 4 for t in tile)
    elif isinstance(overlap, int):
        ovl = (overlap,) * 3
    else:
        ovl = tuple(int(v) for v in overlap)
    for axis, (o, t) in enumerate(zip(ovl, tile)):
        if not 0 <= o < t:
            raise VolumeError(
                f"overlap {o} invalid for tile extent {t} on axis {'xyz'[axis]}"
            )

    weight = (
        _feather_profile(tile[0], ovl[0])[:, None, None]
        * _feather_profile(tile[1], ovl[1])[None, :, None]
        * _feather_profile(tile[2], ovl[2])[None, None, :]
    ).astype(stack.dtype)
    acc = np.zeros(dims, dtype=stack.dtype)
    wsum = np.zeros(dims, dtype=stack.dtype)
    positions = [
        _axis_positions(n, t, max(t - o, 1))
        for n, t, o in zip(dims, tile, ovl)
    ]
    for px in positions[0]:
        for py in positions[1]:
            for pz in positions[2]:
                sl = (
                    slice(px, px + tile[0]),
                    slice(py, py + tile[1]),
                    slice(pz, pz + tile[2]),
                )
                tile_out = gen.forward(stack[(slice(None), *sl)], record=False)[0]
                acc[sl] += weight * tile_out
                wsum[sl] += weight
    return Volume(np.clip(acc / wsum, 0.0, None))


def _cast_generator(gen: UNet3D, dtype) -> UNet3D:
    """Clone a generator with parameters cast to ``dtype``."""

    clone = UNet3D(gen.cfg, rng=None)
    for src, dst in zip(gen._all_layers(), clone._all_layers()):
        for attr in ("weight", "bias", "gamma", "beta"):
            if hasattr(src, attr):
                setattr(dst, attr, getattr(src, attr).astype(dtype))
    return clone
