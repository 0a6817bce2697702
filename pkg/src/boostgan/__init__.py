"""Coarse-to-fine de-occlusion and frontalization of face images."""

__version__ = "0.1.0"
