"""Unsupervised confidence estimation for sparse LiDAR depth maps."""

__version__ = "0.1.0"
