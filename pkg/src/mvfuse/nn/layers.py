"""Primitive network layers with hand-written forward and backward passes.

Conventions shared by every layer:

- Activations are numpy arrays shaped (channels, nx, ny, nz).
- ``forward(x, record=True)`` stashes whatever backward needs; calling
  ``backward`` without a recorded forward raises.
- ``backward(grad_out)`` accumulates parameter gradients in place and returns
  the gradient with respect to the layer input.
- ``params()`` / ``grads()`` return aligned ``(name, array)`` lists.  The
  arrays are the live buffers, not copies, so an optimizer (or a finite
  difference probe) can mutate them directly.

Convolutions are evaluated as one matrix product per kernel offset: for each
of the k^3 taps the padded input is sliced at that offset and contracted with
the (out_channels, in_channels) weight plane.  That keeps the inner loops in
BLAS and makes the adjoint (backward) pass an exact mirror of the forward
indexing.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..volume import VolumeError

# Slope used throughout the fusion nets; gain below follows He init adapted
# to a leaky rectifier.
DEFAULT_LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5


def he_std(fan_in: int, slope: float) -> float:
    """Initialization scale for a leaky-rectified layer."""

    return float(np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in)))


class Layer:
    """Shared parameter bookkeeping for all layers."""

    name: str

    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def grads(self) -> list[tuple[str, np.ndarray]]:
        return []

    def zero_grad(self) -> None:
        for _, g in self.grads():
            g[...] = 0.0

    def _require_record(self, attr: str):
        value = getattr(self, attr, None)
        if value is None:
            raise VolumeError(
                f"{self.name}: backward called without a recorded forward"
            )
        return value


class Conv3d(Layer):
    """3D convolution with zero padding of (kernel - 1) // 2 per axis.

    Stride 1 preserves spatial dims; stride 2 with an odd kernel halves even
    dims (the usual downsampling convolution).  Weights are stored as
    (out_channels, in_channels, kx, ky, kz).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        rng: np.random.Generator | None = None,
        slope: float = DEFAULT_LEAKY_SLOPE,
        name: str = "conv",
    ):
        if kernel < 1 or kernel % 2 == 0:
            raise VolumeError(f"{name}: kernel must be odd and positive, got {kernel}")
        if stride < 1:
            raise VolumeError(f"{name}: stride must be >= 1, got {stride}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = (self.kernel - 1) // 2
        self.name = name
        shape = (self.out_channels, self.in_channels, kernel, kernel, kernel)
        if rng is None:
            self.weight = np.zeros(shape)
        else:
            std = he_std(self.in_channels * kernel ** 3, slope)
            self.weight = rng.normal(0.0, std, size=shape)
        self.bias = np.zeros(self.out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x_padded = None

    def out_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        k, p, s = self.kernel, self.pad, self.stride
        return tuple((n + 2 * p - k) // s + 1 for n in dims)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def grads(self):
        return [
            (f"{self.name}.weight", self.grad_weight),
            (f"{self.name}.bias", self.grad_bias),
        ]

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if self.pad == 0:
            return x
        p = self.pad
        return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))

    def _offset_slice(self, out_dims, offset):
        s = self.stride
        return tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, n in zip(offset, out_dims)
        )

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        if x.shape[0] != self.in_channels:
            raise VolumeError(
                f"{self.name}: expected {self.in_channels} input channels, "
                f"got {x.shape[0]}"
            )
        out_dims = self.out_dims(x.shape[1:])
        if any(n < 1 for n in out_dims):
            raise VolumeError(
                f"{self.name}: input dims {x.shape[1:]} too small for "
                f"kernel {self.kernel} stride {self.stride}"
            )
        xp = self._pad(x)
        out = np.zeros((self.out_channels, *out_dims), dtype=x.dtype)
        k = self.kernel
        for off in itertools.product(range(k), range(k), range(k)):
            sl = xp[(slice(None), *self._offset_slice(out_dims, off))]
            out += np.tensordot(self.weight[:, :, off[0], off[1], off[2]], sl, axes=(1, 0))
        out += self.bias[:, None, None, None].astype(out.dtype, copy=False)
        if record:
            self._x_padded = xp
            self._in_dims = x.shape[1:]
            self._out_dims = out_dims
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xp = self._require_record("_x_padded")
        out_dims = self._out_dims
        self.grad_bias += grad_out.sum(axis=(1, 2, 3))
        grad_padded = np.zeros_like(xp)
        k = self.kernel
        for off in itertools.product(range(k), range(k), range(k)):
            idx = (slice(None), *self._offset_slice(out_dims, off))
            sl = xp[idx]
            self.grad_weight[:, :, off[0], off[1], off[2]] += np.tensordot(
                grad_out, sl, axes=([1, 2, 3], [1, 2, 3])
            )
            grad_padded[idx] += np.tensordot(
                self.weight[:, :, off[0], off[1], off[2]], grad_out, axes=([0], [0])
            )
        p = self.pad
        if p == 0:
            return grad_padded
        return grad_padded[:, p:-p, p:-p, p:-p]


class ConvTranspose3d(Layer):
    """Transposed convolution with kernel == stride (non-overlapping upsampling).

    Doubles (for stride 2) each spatial dim; every output voxel receives
    exactly one kernel tap, so forward is a strided assignment rather than an
    accumulation.  Weights are stored as (in_channels, out_channels, k, k, k).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 2,
        rng: np.random.Generator | None = None,
        slope: float = DEFAULT_LEAKY_SLOPE,
        name: str = "upconv",
    ):
        if kernel < 1:
            raise VolumeError(f"{name}: kernel must be >= 1, got {kernel}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(kernel)
        self.name = name
        shape = (self.in_channels, self.out_channels, kernel, kernel, kernel)
        if rng is None:
            self.weight = np.zeros(shape)
        else:
            std = he_std(self.in_channels, slope)
            self.weight = rng.normal(0.0, std, size=shape)
        self.bias = np.zeros(self.out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def out_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(n * self.stride for n in dims)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def grads(self):
        return [
            (f"{self.name}.weight", self.grad_weight),
            (f"{self.name}.bias", self.grad_bias),
        ]

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        if x.shape[0] != self.in_channels:
            raise VolumeError(
                f"{self.name}: expected {self.in_channels} input channels, "
                f"got {x.shape[0]}"
            )
        out = np.empty((self.out_channels, *self.out_dims(x.shape[1:])), dtype=x.dtype)
        k, s = self.kernel, self.stride
        for off in itertools.product(range(k), range(k), range(k)):
            out[:, off[0]::s, off[1]::s, off[2]::s] = np.tensordot(
                self.weight[:, :, off[0], off[1], off[2]], x, axes=(0, 0)
            )
        out += self.bias[:, None, None, None].astype(out.dtype, copy=False)
        if record:
            self._x = x
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._require_record("_x")
        self.grad_bias += grad_out.sum(axis=(1, 2, 3))
        grad_x = np.zeros_like(x)
        k, s = self.kernel, self.stride
        for off in itertools.product(range(k), range(k), range(k)):
            g_off = grad_out[:, off[0]::s, off[1]::s, off[2]::s]
            self.grad_weight[:, :, off[0], off[1], off[2]] += np.tensordot(
                x, g_off, axes=([1, 2, 3], [1, 2, 3])
            )
            grad_x += np.tensordot(
                self.weight[:, :, off[0], off[1], off[2]], g_off, axes=([1], [0])
            )
        return grad_x


class MaxPool3d(Layer):
    """Window max with first-max tie breaking (matches argmax ordering)."""

    def __init__(self, window: int = 2, name: str = "pool"):
        if window < 1:
            raise VolumeError(f"{name}: window must be >= 1, got {window}")
        self.window = int(window)
        self.name = name
        self._idx = None

    def out_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(n // self.window for n in dims)

    def _windowed(self, x: np.ndarray) -> np.ndarray:
        w = self.window
        c = x.shape[0]
        ox, oy, oz = self.out_dims(x.shape[1:])
        xr = x.reshape(c, ox, w, oy, w, oz, w)
        return xr.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, ox, oy, oz, w ** 3)

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        w = self.window
        for axis, n in zip("xyz", x.shape[1:]):
            if n % w != 0:
                raise VolumeError(
                    f"{self.name}: axis {axis} extent {n} not divisible by "
                    f"window {w}"
                )
        windows = self._windowed(x)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        if record:
            self._idx = idx
            self._in_shape = x.shape
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        idx = self._require_record("_idx")
        c, x_dim, y_dim, z_dim = self._in_shape
        w = self.window
        ox, oy, oz = grad_out.shape[1:]
        flat = np.zeros((c, ox, oy, oz, w ** 3), dtype=grad_out.dtype)
        np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
        grad_x = flat.reshape(c, ox, oy, oz, w, w, w).transpose(0, 1, 4, 2, 5, 3, 6)
        return grad_x.reshape(c, x_dim, y_dim, z_dim)


class InstanceNorm3d(Layer):
    """Per-channel spatial normalization with learned scale and shift.

    Uses population statistics over the spatial axes.  The epsilon keeps an
    all-zero input at exactly zero output (zero mean, zero variance, beta 0),
    which the generator relies on for its zero-preservation contract.
    """

    def __init__(self, channels: int, eps: float = INSTANCE_NORM_EPS, name: str = "norm"):
        self.channels = int(channels)
        self.eps = float(eps)
        self.name = name
        self.gamma = np.ones(self.channels)
        self.beta = np.zeros(self.channels)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self._xhat = None

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def grads(self):
        return [
            (f"{self.name}.gamma", self.grad_gamma),
            (f"{self.name}.beta", self.grad_beta),
        ]

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        if x.shape[0] != self.channels:
            raise VolumeError(
                f"{self.name}: expected {self.channels} channels, got {x.shape[0]}"
            )
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        var = x.var(axis=(1, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        out = self.gamma[:, None, None, None] * xhat + self.beta[:, None, None, None]
        if record:
            self._xhat = xhat
            self._inv = inv
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat = self._require_record("_xhat")
        inv = self._inv
        self.grad_gamma += (grad_out * xhat).sum(axis=(1, 2, 3))
        self.grad_beta += grad_out.sum(axis=(1, 2, 3))
        gh = grad_out * self.gamma[:, None, None, None]
        gh_mean = gh.mean(axis=(1, 2, 3), keepdims=True)
        proj = (gh * xhat).mean(axis=(1, 2, 3), keepdims=True)
        return inv * (gh - gh_mean - xhat * proj)


class LeakyReLU(Layer):
    """Elementwise leaky rectifier; slope 1.0 degenerates to the identity."""

    def __init__(self, slope: float = DEFAULT_LEAKY_SLOPE, name: str = "act"):
        self.slope = float(slope)
        self.name = name
        self._positive = None

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        positive = x > 0
        out = np.where(positive, x, self.slope * x)
        if record:
            self._positive = positive
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        positive = self._require_record("_positive")
        return grad_out * np.where(positive, 1.0, self.slope)
