"""Rate-limited tile-server client and concentric pyramid sampling."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .._parallel import parallel_map
from ..pyramid import (
    PyramidMap,
    TileCoord,
    _atomic_write_bytes,
    encode_png,
    lonlat_to_pixel,
    to_quadkey,
)
from .limiter import RateLimiter
from .mockserver import SENTINEL_HEADER, SENTINEL_VALUE

log = logging.getLogger(__name__)

LATITUDE_CLAMP = 66.0
URBAN_JITTER_M = 5000.0
METERS_PER_DEGREE_LAT = 111320.0

# availability classes, keyed by the highest zoom probed successfully
ZOOM_CLASSES = {20: "high", 19: "mid", 13: "coarse"}
UNKNOWN = "unknown"
UNAVAILABLE = "unavailable"


class IngestError(RuntimeError):
    pass


class TileFetchError(IngestError):
    pass


@dataclasses.dataclass(frozen=True)
class TileServerSpec:
    url_template: str
    rate: float = 10.0
    retries: int = 3
    backoff: float = 0.5
    api_key: str | None = None
    timeout: float = 10.0
    tile_size: int = 256

    def __post_init__(self):
        has_quad = "{quadkey}" in self.url_template
        has_zxy = all(p in self.url_template for p in ("{z}", "{x}", "{y}"))
        if has_quad == has_zxy:
            raise IngestError("url_template needs exactly one of {quadkey} or {z}/{x}/{y}")
        if self.rate <= 0:
            raise IngestError("rate must be positive")
        if self.retries < 0:
            raise IngestError("retries must be >= 0")

    @classmethod
    def from_env(cls, url_template: str, **kw) -> "TileServerSpec":
        kw.setdefault("api_key", os.environ.get("TILECASCADE_API_KEY"))
        return cls(url_template, **kw)

    def url_for(self, c: TileCoord) -> str:
        fields = {"z": c.zoom, "x": c.x, "y": c.y, "key": self.api_key or ""}
        if "{quadkey}" in self.url_template:
            fields["quadkey"] = to_quadkey(c)
        return self.url_template.format(**fields)


class TileClient:
    """Fetches tiles with retry on 5xx/connection errors, through a shared rate limiter."""

    def __init__(self, spec: TileServerSpec, limiter: RateLimiter | None = None, session=None, sleep=time.sleep):
        self.spec = spec
        self.limiter = limiter or RateLimiter(spec.rate)
        self.session = session or requests.Session()
        self._sleep = sleep

    def request(self, c: TileCoord) -> tuple[int, dict, bytes]:
        """Raw ``(status, headers, body)``; status 0 means the connection failed every time."""
        url = self.spec.url_for(c)
        status, headers, body = 0, {}, b""
        for attempt in range(self.spec.retries + 1):
            self.limiter.acquire()
            try:
                r = self.session.get(url, timeout=self.spec.timeout)
                status, headers, body = r.status_code, dict(r.headers), r.content
            except requests.RequestException as e:
                log.warning("request %s failed: %s", url, e)
                status, headers, body = 0, {}, b""
            if status != 0 and status < 500:
                break
            if attempt < self.spec.retries:
                self._sleep(self.spec.backoff * 2**attempt)
        return status, headers, body

    def fetch(self, c: TileCoord) -> np.ndarray | None:
        """Tile as uint8 RGB, ``None`` when the server has no imagery there."""
        status, headers, body = self.request(c)
        if status == 404 or headers.get(SENTINEL_HEADER) == SENTINEL_VALUE:
            return None
        if status != 200:
            raise TileFetchError(f"{self.spec.url_for(c)}: HTTP {status}")
        with Image.open(io.BytesIO(body)) as im:
            arr = np.asarray(im.convert("RGB"))
        ts = self.spec.tile_size
        if arr.shape != (ts, ts, 3):
            raise TileFetchError(f"{self.spec.url_for(c)}: tile shape {arr.shape}")
        return arr

    def probe(self, c: TileCoord) -> bool | None:
        """True if imagery exists, False if the server says it does not, None if unclear."""
        status, headers, _ = self.request(c)
        if status == 200:
            return headers.get(SENTINEL_HEADER) != SENTINEL_VALUE
        if status == 404:
            return False
        return None


@dataclasses.dataclass(frozen=True)
class PyramidSpec:
    lat: float
    lon: float
    zooms: tuple[int, ...] = tuple(range(10, 21))
    stack_side: int = 2048
    jitter_m: float = 0.0
    name: str | None = None

    def __post_init__(self):
        z = list(self.zooms)
        if not z or z != list(range(z[0], z[0] + len(z))):
            raise IngestError(f"zooms must be contiguous ascending, got {z}")
        if self.stack_side <= 0:
            raise IngestError("stack_side must be positive")
        if self.jitter_m < 0:
            raise IngestError("jitter_m must be non-negative")

    @property
    def label(self) -> str:
        return self.name or f"{self.lat:+.5f}_{self.lon:+.5f}"


def check_latitude(lat: float) -> None:
    if not -LATITUDE_CLAMP <= lat <= LATITUDE_CLAMP:
        raise IngestError(f"latitude {lat} outside the +-{LATITUDE_CLAMP} sampling band")


def jittered_center(lat: float, lon: float, radius_m: float, rng: np.random.Generator) -> tuple[float, float]:
    """Uniform point in a disc of ``radius_m`` metres around (lat, lon)."""
    r = radius_m * math.sqrt(rng.random())
    theta = 2 * math.pi * rng.random()
    dlat = r * math.sin(theta) / METERS_PER_DEGREE_LAT
    dlon = r * math.cos(theta) / (METERS_PER_DEGREE_LAT * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    R = 6371008.8
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return 2 * R * math.asin(math.sqrt(a))


def stack_window(lat: float, lon: float, zoom: int, side: int, tile_size: int = 256) -> tuple[int, int]:
    """Global pixel origin ``(x0, y0)`` of the ``side`` px square centred on (lat, lon)."""
    px, py = lonlat_to_pixel(lon, lat, zoom, tile_size)
    return int(math.floor(px)) - side // 2, int(math.floor(py)) - side // 2


def covering_tiles(x0: int, y0: int, side: int, zoom: int, tile_size: int = 256) -> list[TileCoord]:
    """Minimal row-major tile set covering pixels ``[x0, x0+side) x [y0, y0+side)``."""
    n = 1 << zoom
    tx0, tx1 = x0 // tile_size, (x0 + side - 1) // tile_size
    ty0, ty1 = y0 // tile_size, (y0 + side - 1) // tile_size
    if tx0 < 0 or ty0 < 0 or tx1 >= n or ty1 >= n:
        raise IngestError(f"stack window at zoom {zoom} leaves the map")
    return [TileCoord(zoom, x, y) for y in range(ty0, ty1 + 1) for x in range(tx0, tx1 + 1)]


def assemble(tiles: dict[TileCoord, np.ndarray], x0: int, y0: int, side: int, tile_size: int = 256) -> np.ndarray:
    """Mosaic the tiles on the pixel grid (no resampling) and crop to the window."""
    coords = list(tiles)
    tx0 = min(c.x for c in coords)
    ty0 = min(c.y for c in coords)
    nx = max(c.x for c in coords) - tx0 + 1
    ny = max(c.y for c in coords) - ty0 + 1
    mosaic = np.zeros((ny * tile_size, nx * tile_size, 3), dtype=np.uint8)
    for c, img in tiles.items():
        oy, ox = (c.y - ty0) * tile_size, (c.x - tx0) * tile_size
        mosaic[oy : oy + tile_size, ox : ox + tile_size] = img
    oy, ox = y0 - ty0 * tile_size, x0 - tx0 * tile_size
    return mosaic[oy : oy + side, ox : ox + side]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def fetch_pyramid(
    client: TileClient,
    spec: PyramidSpec,
    store: PyramidMap,
    stacks_dir=None,
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> dict:
    """Fetch one concentric stack: one ``stack_side`` image per zoom, all centred on the same point.

    Raw tiles go into ``store`` (tiles already present are not fetched again);
    assembled stack images go to ``stacks_dir/<label>/<zoom>.png``. Failed
    tiles are listed under ``errors`` and that zoom's stack is skipped.
    """
    check_latitude(spec.lat)
    if store.tile_size != client.spec.tile_size:
        raise IngestError("store and server tile sizes differ")
    lat, lon = spec.lat, spec.lon
    if spec.jitter_m > 0:
        if rng is None:
            raise IngestError("jitter needs an explicit rng")
        lat, lon = jittered_center(lat, lon, spec.jitter_m, rng)
        check_latitude(lat)
    ts = store.tile_size
    if spec.stack_side % ts:
        raise IngestError(f"stack side {spec.stack_side} is not a multiple of the tile size {ts}")
    stacks_dir = Path(stacks_dir) if stacks_dir is not None else store.root / "stacks"
    out_dir = stacks_dir / spec.label

    manifest = {"label": spec.label, "lat": lat, "lon": lon, "stack_side": spec.stack_side, "zooms": {}}
    for zoom in spec.zooms:
        x0, y0 = stack_window(lat, lon, zoom, spec.stack_side, ts)
        coords = covering_tiles(x0, y0, spec.stack_side, zoom, ts)
        missing = [c for c in coords if not store.has_tile(c)]

        def get(c):
            try:
                img = client.fetch(c)
            except (TileFetchError, OSError) as e:
                return c, None, str(e)
            if img is None:
                return c, None, "no imagery"
            store.put_tile(c, img, flush=False)
            return c, img, None

        errors = [{"tile": [c.zoom, c.x, c.y], "error": err} for c, _, err in parallel_map(get, missing, threads) if err]
        store.flush()
        entry = {"origin": [x0, y0], "tiles": [[c.zoom, c.x, c.y] for c in coords], "errors": errors}
        if not errors:
            image = assemble({c: store.get_tile(c) for c in coords}, x0, y0, spec.stack_side, ts)
            path = out_dir / f"{zoom}.png"
            _atomic_write_bytes(path, encode_png(image))
            entry["path"] = str(path.relative_to(stacks_dir))
            entry["sha256"] = _sha256(path)
        manifest["zooms"][str(zoom)] = entry
    manifest["complete"] = all(not e["errors"] for e in manifest["zooms"].values())
    _atomic_write_bytes(out_dir / "stack.json", json.dumps(manifest, indent=2).encode())
    return manifest


def classify_availability(client: TileClient, lat: float, lon: float) -> str:
    """Availability class at a location from probes at zooms 20, 19 and 13.

    Returns ``high``, ``mid``, ``coarse``, ``unavailable`` or, when a probe
    answer is neither imagery nor a clear "no imagery", ``unknown``.
    """
    check_latitude(lat)
    for zoom in sorted(ZOOM_CLASSES, reverse=True):
        px, py = lonlat_to_pixel(lon, lat, zoom, client.spec.tile_size)
        c = TileCoord(zoom, int(px // client.spec.tile_size), int(py // client.spec.tile_size))
        ok = client.probe(c)
        if ok is None:
            return UNKNOWN
        if ok:
            return ZOOM_CLASSES[zoom]
    return UNAVAILABLE


def training_eligible(zoom_class: str) -> bool:
    """Only locations with imagery at zoom 19 or finer enter training manifests."""
    return zoom_class in ("mid", "high")


def sample_locations(n: int, rng: np.random.Generator, lat_clamp: float = LATITUDE_CLAMP) -> list[tuple[float, float]]:
    """Uniform (lat, lon) pairs with latitude inside the sampling band."""
    lats = rng.uniform(-lat_clamp, lat_clamp, n)
    lons = rng.uniform(-180.0, 180.0, n)
    return list(zip(lats.tolist(), lons.tolist()))


def build_dataset(
    client: TileClient,
    locations,
    store: PyramidMap,
    zooms=tuple(range(10, 21)),
    stack_side: int = 2048,
    urban: bool = False,
    seed: int = 0,
    threads: int = 1,
) -> dict:
    """Classify each location, fetch stacks for eligible ones, write ``dataset.json``."""
    entries = []
    for i, (lat, lon) in enumerate(locations):
        zc = classify_availability(client, lat, lon)
        entry = {"lat": lat, "lon": lon, "class": zc}
        if training_eligible(zc):
            top = 20 if zc == "high" else 19
            zs = tuple(z for z in zooms if z <= top)
            spec = PyramidSpec(lat, lon, zs, stack_side, URBAN_JITTER_M if urban else 0.0, name=f"stack{i:05d}")
            entry["stack"] = fetch_pyramid(client, spec, store, rng=np.random.default_rng([seed, i]), threads=threads)
        entries.append(entry)
    doc = {"stacks": entries}
    _atomic_write_bytes(store.root / "dataset.json", json.dumps(doc, indent=2).encode())
    return doc

