"""Multi-view fusion generator: a 3D U-Net with hand-written backprop.

The network maps a (n_views, nx, ny, nz) stack of registered views to a
single fused channel.  Each resolution level runs ``convs_per_level``
convolution blocks (conv -> optional instance norm -> leaky ReLU); levels are
connected by 2x max pooling on the way down and kernel-2 transposed
convolutions plus channel concatenation on the way up, with a final 1x1x1
linear convolution producing the output.  Channel counts double per level,
capped at ``max_channels``.

Everything runs in float64 by default so the analytic gradients can be
validated against finite differences; inference may cast to float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import ConfigError
from ..volume import VolumeError
from .layers import (
    DEFAULT_LEAKY_SLOPE,
    Conv3d,
    ConvTranspose3d,
    InstanceNorm3d,
    Layer,
    LeakyReLU,
    MaxPool3d,
)


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture knobs for the fusion U-Net.

    ``levels=1`` with ``kernel=1``, ``instance_norm=False`` and
    ``leaky_slope=1.0`` collapses the network to a per-voxel linear map,
    which the tests compare against an explicit matrix product.
    """

    in_channels: int = 4
    out_channels: int = 1
    levels: int = 3
    base_channels: int = 8
    max_channels: int = 256
    convs_per_level: int = 2
    kernel: int = 3
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    instance_norm: bool = True

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.max_channels < self.base_channels:
            raise ConfigError(
                f"max_channels {self.max_channels} below base_channels "
                f"{self.base_channels}"
            )
        if self.convs_per_level < 1:
            raise ConfigError(
                f"convs_per_level must be >= 1, got {self.convs_per_level}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if not 0.0 < self.leaky_slope <= 1.0:
            raise ConfigError(
                f"leaky_slope must be in (0, 1], got {self.leaky_slope}"
            )

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    @property
    def pool_factor(self) -> int:
        """Spatial divisibility required of any input tile."""

        return 2 ** (self.levels - 1)


class UNet3D:
    """U-Net generator over (channels, nx, ny, nz) arrays."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        levels = cfg.levels
        self.enc_blocks: list[list[Layer]] = []
        self.pools: list[MaxPool3d] = []
        in_ch = cfg.in_channels
        for level in range(levels):
            out_ch = cfg.channels_at(level)
            self.enc_blocks.append(self._block(in_ch, out_ch, rng, f"enc{level}"))
            if level < levels - 1:
                self.pools.append(MaxPool3d(2, name=f"pool{level}"))
            in_ch = out_ch
        self.upconvs: list[ConvTranspose3d] = []
        self.dec_blocks: list[list[Layer]] = []
        for stage, level in enumerate(range(levels - 2, -1, -1)):
            skip_ch = cfg.channels_at(level)
            self.upconvs.append(
                ConvTranspose3d(
                    in_ch, skip_ch, kernel=2, rng=rng, slope=cfg.leaky_slope,
                    name=f"up{stage}",
                )
            )
            self.dec_blocks.append(
                self._block(2 * skip_ch, skip_ch, rng, f"dec{stage}")
            )
            in_ch = skip_ch
        self.final = Conv3d(
            in_ch, cfg.out_channels, kernel=1, stride=1, rng=rng,
            slope=1.0, name="head",
        )
        self._recorded = False

    def _block(self, in_ch: int, out_ch: int, rng, prefix: str) -> list[Layer]:
        cfg = self.cfg
        layers: list[Layer] = []
        cur = in_ch
        for i in range(cfg.convs_per_level):
            layers.append(
                Conv3d(
                    cur, out_ch, kernel=cfg.kernel, stride=1, rng=rng,
                    slope=cfg.leaky_slope, name=f"{prefix}.conv{i}",
                )
            )
            if cfg.instance_norm:
                layers.append(InstanceNorm3d(out_ch, name=f"{prefix}.norm{i}"))
            layers.append(LeakyReLU(cfg.leaky_slope, name=f"{prefix}.act{i}"))
            cur = out_ch
        return layers

    def _all_layers(self) -> list[Layer]:
        layers: list[Layer] = []
        for block in self.enc_blocks:
            layers.extend(block)
        layers.extend(self.pools)
        layers.extend(self.upconvs)
        for block in self.dec_blocks:
            layers.extend(block)
        layers.append(self.final)
        return layers

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

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.params())

    def load_params(self, entries: list[tuple[str, np.ndarray]]) -> None:
        """Copy named arrays into the live parameter buffers."""

        table = dict(self.params())
        seen = set()
        for name, arr in entries:
            if name not in table:
                raise VolumeError(f"unknown parameter {name!r}")
            if table[name].shape != arr.shape:
                raise VolumeError(
                    f"parameter {name!r} shape {arr.shape} does not match "
                    f"expected {table[name].shape}"
                )
            table[name][...] = arr
            seen.add(name)
        missing = [name for name in table if name not in seen]
        if missing:
            raise VolumeError(f"missing parameters: {missing[:3]}...")

    def validate_dims(self, dims: tuple[int, int, int]) -> None:
        factor = self.cfg.pool_factor
        for axis, n in zip("xyz", dims):
            if n % factor != 0:
                raise VolumeError(
                    f"axis {axis} extent {n} not divisible by {factor} "
                    f"(levels={self.cfg.levels})"
                )

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise VolumeError(
                f"expected input of shape ({self.cfg.in_channels}, nx, ny, nz), "
                f"got {x.shape}"
            )
        self.validate_dims(x.shape[1:])
        levels = self.cfg.levels
        skips: list[np.ndarray] = []
        h = x
        for level in range(levels):
            for layer in self.enc_blocks[level]:
                h = layer.forward(h, record)
            if level < levels - 1:
                skips.append(h)
                h = self.pools[level].forward(h, record)
        for stage, level in enumerate(range(levels - 2, -1, -1)):
            h = self.upconvs[stage].forward(h, record)
            h = np.concatenate([h, skips[level]], axis=0)
            for layer in self.dec_blocks[stage]:
                h = layer.forward(h, record)
        out = self.final.forward(h, record)
        self._recorded = record
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient."""

        if not self._recorded:
            raise VolumeError("backward called without a recorded forward")
        levels = self.cfg.levels
        g = self.final.backward(grad_out)
        skip_grads: dict[int, np.ndarray] = {}
        for stage in reversed(range(levels - 1)):
            level = levels - 2 - stage
            for layer in reversed(self.dec_blocks[stage]):
                g = layer.backward(g)
            up_ch = self.upconvs[stage].out_channels
            skip_grads[level] = g[up_ch:]
            g = self.upconvs[stage].backward(g[:up_ch])
        for level in reversed(range(levels)):
            if level < levels - 1:
                g = self.pools[level].backward(g)
                g = g + skip_grads[level]
            for layer in reversed(self.enc_blocks[level]):
                g = layer.backward(g)
        return g
