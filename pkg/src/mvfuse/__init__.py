"""Multi-view 3D deconvolution and fusion toolkit.

Simulates degraded multi-view volumes from synthetic phantoms, fuses them
with classical baselines (entropy-weighted content fusion, multi-view
Richardson-Lucy) or a cycle-consistent convolutional generator, and scores
everything with a shared normalization and metric protocol.
"""

from .volume import (
    BOUNDARY_CIRCULAR,
    BOUNDARY_ZERO_PAD,
    FftConvolver,
    Psf,
    ViewSet,
    Volume,
    VolumeError,
    convolve,
    correlate,
    rotate_y_90,
)

__version__ = "0.1.0"

__all__ = [
    "BOUNDARY_CIRCULAR",
    "BOUNDARY_ZERO_PAD",
    "FftConvolver",
    "Psf",
    "ViewSet",
    "Volume",
    "VolumeError",
    "convolve",
    "correlate",
    "rotate_y_90",
    "__version__",
]
