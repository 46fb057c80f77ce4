"""Multi-scale patch discriminators for the adversarial training mode.

Each scale judges patches of a fixed size: scale 0 sees the full training
tile, higher scales see uniformly random crops.  A scale's network is a stack
of stride-2 convolutions with leaky ReLU (instance norm optional, never on
the first layer), a 1x1x1 linear projection to one channel, and a global mean
producing the scalar score consumed by the least-squares GAN losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import ConfigError
from ..volume import VolumeError
from .layers import (
    DEFAULT_LEAKY_SLOPE,
    Conv3d,
    InstanceNorm3d,
    Layer,
    LeakyReLU,
)

DESK_PATCH_DIMS = ((32, 32, 32), (16, 16, 16))


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Shape of the discriminator ensemble.

    ``patch_dims[0]`` must equal the training tile dims (scale 0 is the
    identity crop); later scales must fit inside the tile.
    """

    n_scales: int = 2
    patch_dims: tuple = DESK_PATCH_DIMS
    depth: int = 3
    base_channels: int = 8
    kernel: int = 3
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    instance_norm: bool = True
    in_channels: int = 1

    def __post_init__(self):
        if self.n_scales < 1:
            raise ConfigError(f"n_scales must be >= 1, got {self.n_scales}")
        dims = tuple(tuple(int(v) for v in d) for d in self.patch_dims)
        if len(dims) != self.n_scales:
            raise ConfigError(
                f"patch_dims has {len(dims)} entries for {self.n_scales} scales"
            )
        for d in dims:
            if len(d) != 3 or any(v < 1 for v in d):
                raise ConfigError(f"invalid patch dims {d}")
        object.__setattr__(self, "patch_dims", dims)
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(
                f"base_channels must be >= 1, got {self.base_channels}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if not 0.0 < self.leaky_slope <= 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1], got {self.leaky_slope}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")


class PatchDiscriminator:
    """Single-scale patch critic; returns one scalar score per patch."""

    def __init__(
        self,
        cfg: DiscriminatorConfig,
        expected_dims: tuple[int, int, int],
        rng: np.random.Generator,
        name: str = "disc",
    ):
        self.cfg = cfg
        self.expected_dims = tuple(int(v) for v in expected_dims)
        self.name = name
        self.layers: list[Layer] = []
        in_ch = cfg.in_channels
        for d in range(cfg.depth):
            out_ch = cfg.base_channels * 2 ** d
            self.layers.append(
                Conv3d(
                    in_ch, out_ch, kernel=cfg.kernel, stride=2, rng=rng,
                    slope=cfg.leaky_slope, name=f"{name}.conv{d}",
                )
            )
            # Raw patches keep their absolute intensity statistics: no norm
            # on the first layer.
            if cfg.instance_norm and d > 0:
                self.layers.append(InstanceNorm3d(out_ch, name=f"{name}.norm{d}"))
            self.layers.append(LeakyReLU(cfg.leaky_slope, name=f"{name}.act{d}"))
            in_ch = out_ch
        self.head = Conv3d(
            in_ch, 1, kernel=1, stride=1, rng=rng, slope=1.0, name=f"{name}.head"
        )
        self._score_shape = None

    def _all_layers(self) -> list[Layer]:
        return [*self.layers, self.head]

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self._all_layers():
            out.extend(layer.params())
        return out

    def grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self._all_layers():
            out.extend(layer.grads())
        return out

    def zero_grad(self) -> None:
        for layer in self._all_layers():
            layer.zero_grad()

    def forward(self, patch: np.ndarray, record: bool = False) -> float:
        if patch.ndim != 4 or patch.shape[0] != self.cfg.in_channels:
            raise VolumeError(
                f"{self.name}: expected ({self.cfg.in_channels}, nx, ny, nz) "
                f"patch, got shape {patch.shape}"
            )
        if tuple(patch.shape[1:]) != self.expected_dims:
            raise VolumeError(
                f"{self.name}: patch dims {tuple(patch.shape[1:])} do not match "
                f"configured scale dims {self.expected_dims}"
            )
        h = patch
        for layer in self.layers:
            h = layer.forward(h, record)
        h = self.head.forward(h, record)
        if record:
            self._score_shape = h.shape
        return float(h.mean())

    def backward(self, grad_score: float) -> np.ndarray:
        """Backprop from the scalar score; returns the patch gradient."""

        if self._score_shape is None:
            raise VolumeError(
                f"{self.name}: backward called without a recorded forward"
            )
        shape = self._score_shape
        g = np.full(shape, grad_score / np.prod(shape))
        g = self.head.backward(g)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class MultiScaleDiscriminator:
    """The per-scale critics plus the crop operators feeding them."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.scales = [
            PatchDiscriminator(cfg, dims, rng, name=f"disc{j}")
            for j, dims in enumerate(cfg.patch_dims)
        ]

    @property
    def n_scales(self) -> int:
        return self.cfg.n_scales

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for scale in self.scales:
            out.extend(scale.params())
        return out

    def zero_grad(self) -> None:
        for scale in self.scales:
            scale.zero_grad()

    def load_params(self, entries: list[tuple[str, np.ndarray]]) -> None:
        table = dict(self.params())
        for name, arr in entries:
            if name not in table:
                raise VolumeError(f"unknown parameter {name!r}")
            if table[name].shape != arr.shape:
                raise VolumeError(
                    f"parameter {name!r} shape {arr.shape} does not match "
                    f"expected {table[name].shape}"
                )
            table[name][...] = arr

    def crop(self, vol: np.ndarray, scale_index: int, rng: np.random.Generator):
        """Crop for one scale; returns (patch, offsets) so gradients can be
        scattered back into the tile."""

        patch_dims = self.cfg.patch_dims[scale_index]
        if scale_index == 0:
            return vol, (0, 0, 0)
        offsets = crop_offsets(vol.shape[1:], patch_dims, rng)
        return crop_patch(vol, offsets, patch_dims), offsets


def crop_offsets(
    vol_dims: tuple[int, int, int],
    patch_dims: tuple[int, int, int],
    rng: np.random.Generator,
) -> tuple[int, int, int]:
    """Uniform random corner for an axis-aligned crop."""

    for axis, (n, p) in enumerate(zip(vol_dims, patch_dims)):
        if p > n:
            raise VolumeError(
                f"patch extent {p} exceeds volume extent {n} on axis "
                f"{'xyz'[axis]}"
            )
    return tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(vol_dims, patch_dims))


def crop_patch(
    vol: np.ndarray,
    offsets: tuple[int, int, int],
    patch_dims: tuple[int, int, int],
) -> np.ndarray:
    sl = tuple(slice(o, o + p) for o, p in zip(offsets, patch_dims))
    return vol[(slice(None), *sl)]


def crop_scale_patches(
    vol: np.ndarray,
    cfg: DiscriminatorConfig,
    scale_index: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Functional form of the per-scale crop: scale 0 is the identity, higher
    scales draw a uniformly random crop of the configured dims."""

    if not 0 <= scale_index < cfg.n_scales:
        raise VolumeError(f"scale index {scale_index} out of range")
    if scale_index == 0:
        return vol
    patch_dims = cfg.patch_dims[scale_index]
    offsets = crop_offsets(vol.shape[1:], patch_dims, rng)
    return crop_patch(vol, offsets, patch_dims)


def embed_patch_grad(
    tile_shape: tuple,
    offsets: tuple[int, int, int],
    patch_grad: np.ndarray,
) -> np.ndarray:
    """Scatter a patch gradient back to tile coordinates (adjoint of crop)."""

    out = np.zeros(tile_shape, dtype=patch_grad.dtype)
    sl = tuple(slice(o, o + p) for o, p in zip(offsets, patch_grad.shape[1:]))
    out[(slice(None), *sl)] = patch_grad
    return out
