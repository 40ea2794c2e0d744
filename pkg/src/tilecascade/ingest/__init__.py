"""Tile-server ingestion, the bundled mock server, and synthetic pyramids."""

from .client import (
    IngestError,
    PyramidSpec,
    TileClient,
    TileFetchError,
    TileServerSpec,
    build_dataset,
    classify_availability,
    fetch_pyramid,
)
from .limiter import RateLimiter
from .mockserver import MockTileServer, pattern_region
from .synth import box_downsample, centre_crop_half, synth_pyramid

__all__ = [
    "IngestError",
    "MockTileServer",
    "PyramidSpec",
    "RateLimiter",
    "TileClient",
    "TileFetchError",
    "TileServerSpec",
    "box_downsample",
    "build_dataset",
    "centre_crop_half",
    "classify_availability",
    "fetch_pyramid",
    "pattern_region",
    "synth_pyramid",
]
