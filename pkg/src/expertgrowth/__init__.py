"""Centroid-indexed local residual experts on a shifted-dynamics control task."""

__version__ = "0.1.0"
