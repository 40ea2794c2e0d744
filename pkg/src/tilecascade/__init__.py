"""Tiled, cascaded diffusion synthesis of large multi-resolution raster maps."""

__version__ = "0.1.0"
