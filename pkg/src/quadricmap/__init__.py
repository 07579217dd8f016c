"""Monocular object mapping with ellipsoid landmarks."""

__version__ = "0.1.0"
