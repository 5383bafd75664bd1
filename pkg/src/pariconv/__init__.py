"""Rotation-invariant point cloud convolution with pose-aware dynamic kernels."""

__version__ = "0.1.0"
