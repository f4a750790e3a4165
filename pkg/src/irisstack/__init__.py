"""Iris recognition from overlapping-patch stacks with a 3D inception network."""

__version__ = "0.1.0"
