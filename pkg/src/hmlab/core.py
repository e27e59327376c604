"""Grid types, centered unitary Fourier transforms and shared helpers.

Images are plain ``complex128`` arrays of shape ``(height, width)``; row
index is ``y`` (phase encode), column index is ``x`` (frequency encode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIZE = 8


class ShapeError(ValueError):
    """Raised when array shapes do not agree."""


class NumericalError(RuntimeError):
    """Raised when an iterate becomes non-finite or a solver diverges."""


@dataclass(frozen=True)
class FieldOfView:
    """Physical extent of the imaged rectangle and its pixel grid."""

    width_extent: float
    height_extent: float
    shape: tuple[int, int]

    def __post_init__(self):
        if self.width_extent <= 0 or self.height_extent <= 0:
            raise ValueError("field of view extents must be positive")

    @classmethod
    def unit(cls, shape):
        return cls(1.0, 1.0, tuple(int(n) for n in shape))

    @property
    def pixel_size(self) -> tuple[float, float]:
        """(dx, dy) physical size of one pixel."""
        h, w = self.shape
        return self.width_extent / w, self.height_extent / h


def as_image(x, name="image") -> np.ndarray:
    """Validate and convert to a 2D complex128 image."""
    a = np.asarray(x, dtype=np.complex128)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {a.shape}")
    if min(a.shape) < MIN_SIZE:
        raise ShapeError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite samples")
    return a


def check_same_shape(a_shape, b_shape, what="arrays"):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a_shape)} vs {tuple(b_shape)}")


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered, unitary 2D DFT over the last two axes.

    DC lands at index ``(H // 2, W // 2)``. Leading axes are batch axes.
    """
    x = np.asarray(x, dtype=np.complex128)
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    k = np.asarray(k, dtype=np.complex128)
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


def centered_frequencies(n: int) -> np.ndarray:
    """Normalized angular frequencies in [-pi, pi) for a centered axis of length n."""
    return 2 * np.pi * (np.arange(n) - n // 2) / n


def rel_norm(a, b) -> float:
    """||a - b|| / ||b|| with a zero-safe denominator."""
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / (nb if nb > 0 else 1.0))
