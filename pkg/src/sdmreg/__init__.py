"""Segmentation-driven deformable 3D registration."""

__version__ = "0.1.0"
