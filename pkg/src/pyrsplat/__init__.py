"""Pyramidal multi-scale 3D Gaussian splatting engine."""

__version__ = "0.1.0"
