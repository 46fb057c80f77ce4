"""Dense 3D volumes, blur kernels and FFT-based convolution/correlation.

This module is the substrate for everything else: it defines the volume and
kernel containers, exact circular / zero-padded FFT convolution with its
adjoint (correlation), and the 90-degree kernel rotation used to derive
per-view kernels from a base kernel.

Conventions
-----------
* A volume is indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``.
  On disk the voxel stream is x-fastest (see :mod:`mvfuse.io`).
* Kernels have odd extents per axis; the geometric center voxel is the
  kernel origin.
* Rotations are right-handed about the +y axis.  One quarter turn maps the
  centered voxel coordinate ``(u, v, w)`` to ``(w, v, -u)``, i.e. a weight
  sitting at ``(+1, 0, 0)`` moves to ``(0, 0, -1)``.
* All FFT work is done in float64 regardless of the storage dtype of the
  inputs; results are bit-for-bit reproducible for fixed shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY_CIRCULAR = "circular"
BOUNDARY_ZERO_PAD = "zero-pad"
_BOUNDARIES = (BOUNDARY_CIRCULAR, BOUNDARY_ZERO_PAD)

PSF_NORMALIZATION_TOL = 1e-9


class VolumeError(ValueError):
    """Raised for invalid volume/kernel data or incompatible shapes."""


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    """Dense scalar 3D field.

    ``data`` is a float array of shape ``(nx, ny, nz)``.  Physical images
    (phantoms, views, fusion results) are expected to be finite and
    non-negative; use :meth:`assert_physical` where that contract matters.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise VolumeError(f"volume dims must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, dims, dtype=np.float64) -> "Volume":
        return cls(np.zeros(tuple(dims), dtype=dtype))

    @classmethod
    def from_array(cls, arr) -> "Volume":
        return cls(np.asarray(arr))

    def astype(self, dtype) -> "Volume":
        return Volume(self.data.astype(dtype))

    def copy(self) -> "Volume":
        return Volume(self.data.copy())

    def assert_physical(self, what: str = "volume"):
        """Check the finite/non-negative contract for physical images."""
        if not np.all(np.isfinite(self.data)):
            raise VolumeError(f"{what} contains NaN/Inf")
        if np.any(self.data < 0):
            raise VolumeError(f"{what} contains negative values")


@dataclass
class Psf:
    """Small odd-sized 3D blur kernel with non-negative weights.

    ``normalized`` is true when the weights sum to 1 within
    ``PSF_NORMALIZATION_TOL``.  ``meta`` carries free-form annotations
    (e.g. truncation warnings from the synthesizer) that end up in the
    file header.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise VolumeError(f"kernel must be 3D, got shape {arr.shape}")
        if any(k % 2 == 0 or k < 1 for k in arr.shape):
            raise VolumeError(f"kernel dims must be odd and >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("kernel contains NaN/Inf")
        if np.any(arr < 0):
            raise VolumeError("kernel weights must be >= 0")
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def center(self) -> tuple[int, int, int]:
        return tuple((k - 1) // 2 for k in self.data.shape)

    @property
    def normalized(self) -> bool:
        return abs(float(self.data.sum()) - 1.0) <= PSF_NORMALIZATION_TOL

    @classmethod
    def from_array(cls, arr, normalize: bool = False, meta: dict | None = None) -> "Psf":
        arr = np.asarray(arr, dtype=np.float64)
        if normalize:
            s = arr.sum()
            if s <= 0:
                raise VolumeError("cannot normalize kernel with non-positive sum")
            arr = arr / s
        return cls(arr, meta=dict(meta or {}))

    @classmethod
    def delta(cls, dims=(1, 1, 1)) -> "Psf":
        """Identity kernel: single unit weight at the center."""
        arr = np.zeros(tuple(dims), dtype=np.float64)
        arr[tuple((k - 1) // 2 for k in arr.shape)] = 1.0
        return cls(arr)

    def mirrored(self) -> "Psf":
        """Point mirror about the center voxel (the correlation kernel)."""
        return Psf(self.data[::-1, ::-1, ::-1].copy(), meta=dict(self.meta))


@dataclass
class ViewSet:
    """Registered multi-view bundle sharing one latent-image frame."""

    views: list[Volume]
    psfs: list[Psf]
    angles_deg: list[int]

    def __post_init__(self):
        if not (len(self.views) == len(self.psfs) == len(self.angles_deg)):
            raise VolumeError("views, psfs and angles must have equal length")
        # Fusion needs >= 2 views (enforced by the fusion ops); single-view
        # sets are valid for plain deconvolution.
        if len(self.views) < 1:
            raise VolumeError("a view set needs at least 1 view")
        dims0 = self.views[0].dims
        for v in self.views[1:]:
            if v.dims != dims0:
                raise VolumeError(f"all views must share dims, got {v.dims} vs {dims0}")
        for a in self.angles_deg:
            if a % 90 != 0:
                raise VolumeError(f"view angles must be multiples of 90, got {a}")

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.views[0].dims


# ---------------------------------------------------------------------------
# FFT plumbing
# ---------------------------------------------------------------------------

def fft_forward(arr: np.ndarray) -> np.ndarray:
    """Forward DFT over all axes (float64/complex128)."""
    arr = np.asarray(arr)
    if any(n < 1 for n in arr.shape):
        raise VolumeError(f"cannot FFT zero-length axis, shape {arr.shape}")
    return np.fft.fftn(arr.astype(np.complex128, copy=False))


def fft_inverse(arr: np.ndarray) -> np.ndarray:
    """Inverse DFT over all axes."""
    arr = np.asarray(arr)
    if any(n < 1 for n in arr.shape):
        raise VolumeError(f"cannot FFT zero-length axis, shape {arr.shape}")
    return np.fft.ifftn(np.asarray(arr, dtype=np.complex128))


def _embed_kernel_circular(kernel: np.ndarray, dims) -> np.ndarray:
    """Place a kernel in a dims-sized array with its center at the origin.

    Indices wrap around, so the kernel tail ends up at the high end of each
    axis; this makes plain FFT products implement centered circular
    convolution.
    """
    out = np.zeros(tuple(dims), dtype=np.float64)
    idx = []
    for k, n in zip(kernel.shape, dims):
        c = (k - 1) // 2
        idx.append((np.arange(k) - c) % n)
    out[np.ix_(*idx)] = kernel
    return out


class FftConvolver:
    """Reusable convolution/correlation with a fixed kernel and target dims.

    Precomputes the kernel transform once; useful for iterative algorithms
    that apply the same kernel hundreds of times.  Both operations return
    float64 arrays of the target dims.

    Under circular boundary the pair is exactly adjoint:
    ``<convolve(a), b> == <a, correlate(b)>``.
    """

    def __init__(self, psf: Psf, dims, boundary: str = BOUNDARY_CIRCULAR):
        if boundary not in _BOUNDARIES:
            raise VolumeError(f"unknown boundary mode {boundary!r}")
        dims = tuple(int(n) for n in dims)
        if any(k > n for k, n in zip(psf.dims, dims)):
            raise VolumeError("psf larger than volume")
        self.dims = dims
        self.boundary = boundary
        self.kdims = psf.dims
        if boundary == BOUNDARY_CIRCULAR:
            self._fft_dims = dims
            self._otf = np.fft.rfftn(_embed_kernel_circular(psf.data, dims))
            self._otf_corr = np.conj(self._otf)
        else:
            # linear convolution on a dims + kdims - 1 grid, cropped to 'same';
            # correlation = convolution with the point-mirrored kernel, which
            # for odd kernels shares the same center and crop.
            self._fft_dims = tuple(n + k - 1 for n, k in zip(dims, psf.dims))
            kern = np.zeros(self._fft_dims, dtype=np.float64)
            sl = tuple(slice(0, k) for k in psf.dims)
            kern[sl] = psf.data
            self._otf = np.fft.rfftn(kern)
            kern[sl] = psf.mirrored().data
            self._otf_corr = np.fft.rfftn(kern)

    def _apply(self, arr: np.ndarray, otf: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self.dims:
            raise VolumeError(f"expected array of dims {self.dims}, got {arr.shape}")
        axes = (0, 1, 2)
        if self.boundary == BOUNDARY_CIRCULAR:
            spec = np.fft.rfftn(arr)
            return np.fft.irfftn(spec * otf, s=self._fft_dims, axes=axes)
        pad = np.zeros(self._fft_dims, dtype=np.float64)
        pad[tuple(slice(0, n) for n in self.dims)] = arr
        full = np.fft.irfftn(np.fft.rfftn(pad) * otf, s=self._fft_dims, axes=axes)
        crop = tuple(
            slice(c, c + n)
            for c, n in zip(((k - 1) // 2 for k in self.kdims), self.dims)
        )
        return full[crop]

    def convolve(self, arr: np.ndarray) -> np.ndarray:
        return self._apply(arr, self._otf)

    def correlate(self, arr: np.ndarray) -> np.ndarray:
        return self._apply(arr, self._otf_corr)


def _check_conv_inputs(vol: Volume, psf: Psf):
    if any(k > n for k, n in zip(psf.dims, vol.dims)):
        raise VolumeError("psf larger than volume")
    if not np.all(np.isfinite(vol.data)):
        raise VolumeError("volume contains NaN/Inf")


def convolve(vol: Volume, psf: Psf, boundary: str = BOUNDARY_CIRCULAR) -> Volume:
    """Convolve a volume with a kernel; output has the volume's dims.

    Linear in ``vol``.  Circular boundary wraps the volume (exact adjoint
    pair with :func:`correlate`); zero-pad treats everything outside the
    volume as 0.
    """
    _check_conv_inputs(vol, psf)
    return Volume(FftConvolver(psf, vol.dims, boundary).convolve(vol.data))


def correlate(vol: Volume, psf: Psf, boundary: str = BOUNDARY_CIRCULAR) -> Volume:
    """Cross-correlate a volume with a kernel (adjoint of :func:`convolve`).

    Equal to convolution with the point-mirrored kernel.
    """
    _check_conv_inputs(vol, psf)
    return Volume(FftConvolver(psf, vol.dims, boundary).correlate(vol.data))


# ---------------------------------------------------------------------------
# kernel rotation
# ---------------------------------------------------------------------------

def rotate_y_90(psf: Psf, quarter_turns: int) -> Psf:
    """Rotate a kernel by ``quarter_turns * 90`` degrees about the +y axis.

    Right-handed convention; with centered coordinates ``(u, v, w)`` one
    quarter turn applies the index permutation

        ==========  ===========
        source      destination
        ==========  ===========
        (+1, 0, 0)  (0, 0, -1)
        (0, 0, +1)  (+1, 0, 0)
        (-1, 0, 0)  (0, 0, +1)
        (0, 0, -1)  (-1, 0, 0)
        ==========  ===========

    Voxel-exact: weights are permuted, never interpolated, so the sum is
    unchanged and four turns restore the kernel bit for bit.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise VolumeError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    kx, ky, kz = psf.dims
    if kx != kz:
        raise VolumeError(f"rotation about y needs kx == kz, got {kx} vs {kz}")
    arr = psf.data
    for _ in range(quarter_turns):
        # dest[u, v, w] = src[-w, v, u]
        arr = np.transpose(arr, (2, 1, 0))[:, :, ::-1]
    return Psf(np.ascontiguousarray(arr), meta=dict(psf.meta))
