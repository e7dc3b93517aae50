"""Differentiable point cloud rendering and multi-view fitting."""

__version__ = "0.1.0"
