"""Projective-geometric tools for 2D second-order superintegrable systems."""

__version__ = "0.1.0"
