"""Reconstruct transparent objects as neural signed distance fields from refraction correspondences."""

__version__ = "0.1.0"
