"""Tactile super-resolution for magnetometer-array skins."""

__version__ = "0.1.0"
