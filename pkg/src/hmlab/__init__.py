"""Simulation, reconstruction and motion estimation for motion-corrupted
2D multi-coil HASTE MRI."""

from hmlab.core import FieldOfView, fft2c, ifft2c
from hmlab.warp import DeformationField, DeformationTimeline

__all__ = ["FieldOfView", "fft2c", "ifft2c", "DeformationField", "DeformationTimeline"]

__version__ = "0.1.0"
