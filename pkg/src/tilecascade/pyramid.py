"""Web-Mercator tile addressing and a sparse PNG tile store.

Tiles live at ``<root>/<zoom>/<x>/<y>.png`` so the tree can be served to an
ordinary slippy-map viewer. A ``manifest.json`` next to the zoom directories
lists the stored coordinates; it is rebuilt from the directory tree when it
is missing or unreadable.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import tempfile
import threading
from pathlib import Path

import numpy as np
from PIL import Image

EARTH_RADIUS_M = 6378137.0
# metres per pixel at zoom 0 on the equator for 256 px tiles
GROUND_RES_Z0 = 2.0 * math.pi * EARTH_RADIUS_M / 256.0
MAX_LATITUDE = 85.05
MAX_ZOOM = 23
MANIFEST = "manifest.json"


class PyramidError(ValueError):
    pass


class StoreError(OSError):
    pass


def ground_resolution(zoom: int, latitude: float) -> float:
    """Metres per pixel at ``zoom`` and ``latitude`` (degrees)."""
    if not 0 <= zoom <= MAX_ZOOM or int(zoom) != zoom:
        raise PyramidError(f"zoom must be an integer in [0, {MAX_ZOOM}], got {zoom}")
    if not -MAX_LATITUDE <= latitude <= MAX_LATITUDE:
        raise PyramidError(f"latitude {latitude} outside +-{MAX_LATITUDE}")
    return GROUND_RES_Z0 * math.cos(math.radians(latitude)) / 2.0**zoom


@dataclasses.dataclass(frozen=True, order=True)
class TileCoord:
    zoom: int
    x: int
    y: int

    def __post_init__(self):
        if not 0 <= self.zoom <= MAX_ZOOM:
            raise PyramidError(f"zoom {self.zoom} outside [0, {MAX_ZOOM}]")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise PyramidError(f"({self.x}, {self.y}) outside the {n}x{n} grid at zoom {self.zoom}")

    def children(self) -> list["TileCoord"]:
        if self.zoom >= MAX_ZOOM:
            raise PyramidError("cannot split a tile at the maximum zoom")
        z, x, y = self.zoom + 1, 2 * self.x, 2 * self.y
        return [TileCoord(z, x, y), TileCoord(z, x + 1, y), TileCoord(z, x, y + 1), TileCoord(z, x + 1, y + 1)]

    def parent(self) -> "TileCoord":
        if self.zoom == 0:
            raise PyramidError("the root tile has no parent")
        return TileCoord(self.zoom - 1, self.x >> 1, self.y >> 1)

    def quadkey(self) -> str:
        return to_quadkey(self)


def children(c: TileCoord) -> list[TileCoord]:
    return c.children()


def to_quadkey(c: TileCoord) -> str:
    if c.zoom == 0:
        raise PyramidError("zoom 0 has an empty quadkey")
    digits = []
    for k in range(c.zoom - 1, -1, -1):
        digits.append(str(((c.y >> k) & 1) * 2 + ((c.x >> k) & 1)))
    return "".join(digits)


def from_quadkey(key: str) -> TileCoord:
    if not key or any(ch not in "0123" for ch in key):
        raise PyramidError(f"invalid quadkey {key!r}")
    x = y = 0
    for ch in key:
        d = int(ch)
        x = (x << 1) | (d & 1)
        y = (y << 1) | (d >> 1)
    return TileCoord(len(key), x, y)


def lonlat_to_pixel(lon: float, lat: float, zoom: int, tile_size: int = 256) -> tuple[float, float]:
    """Global Web-Mercator pixel coordinates (x to the east, y to the south)."""
    if not -MAX_LATITUDE <= lat <= MAX_LATITUDE:
        raise PyramidError(f"latitude {lat} outside +-{MAX_LATITUDE}")
    size = tile_size * 2.0**zoom
    s = math.sin(math.radians(lat))
    px = (lon + 180.0) / 360.0 * size
    py = (0.5 - math.log((1 + s) / (1 - s)) / (4 * math.pi)) * size
    return px, py


def pixel_to_lonlat(px: float, py: float, zoom: int, tile_size: int = 256) -> tuple[float, float]:
    size = tile_size * 2.0**zoom
    lon = px / size * 360.0 - 180.0
    n = math.pi - 2.0 * math.pi * py / size
    lat = math.degrees(math.atan(math.sinh(n)))
    return lon, lat


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


class PyramidMap:
    """Sparse on-disk map of 8-bit RGB tiles keyed by :class:`TileCoord`."""

    def __init__(self, root, tile_size: int = 256):
        self.root = Path(root)
        self.tile_size = int(tile_size)
        if self.tile_size < 1:
            raise PyramidError("tile size must be positive")
        self._lock = threading.Lock()
        self.root.mkdir(parents=True, exist_ok=True)
        self._coords = self._load_manifest()

    # manifest

    def _manifest_path(self) -> Path:
        return self.root / MANIFEST

    def _load_manifest(self) -> set[TileCoord]:
        try:
            doc = json.loads(self._manifest_path().read_text())
            if doc.get("tile_size", self.tile_size) != self.tile_size:
                raise PyramidError(
                    f"store at {self.root} has tile size {doc['tile_size']}, opened with {self.tile_size}"
                )
            coords = {TileCoord(*t) for t in doc["tiles"]}
            if all(self.path(c).exists() for c in coords):
                return coords
        except (FileNotFoundError, json.JSONDecodeError, KeyError, TypeError):
            pass
        coords = self.scan()
        self._write_manifest(coords)
        return coords

    def scan(self) -> set[TileCoord]:
        """Coordinates of every PNG present on disk."""
        found = set()
        for zdir in self.root.iterdir():
            if not (zdir.is_dir() and zdir.name.isdigit()):
                continue
            for xdir in zdir.iterdir():
                if not (xdir.is_dir() and xdir.name.isdigit()):
                    continue
                for f in xdir.glob("*.png"):
                    if f.stem.isdigit():
                        found.add(TileCoord(int(zdir.name), int(xdir.name), int(f.stem)))
        return found

    def _write_manifest(self, coords) -> None:
        doc = {"tile_size": self.tile_size, "tiles": [list(dataclasses.astuple(c)) for c in sorted(coords)]}
        _atomic_write_bytes(self._manifest_path(), json.dumps(doc).encode())

    def flush(self) -> None:
        with self._lock:
            self._write_manifest(self._coords)

    # tiles

    def path(self, c: TileCoord) -> Path:
        return self.root / str(c.zoom) / str(c.x) / f"{c.y}.png"

    def _check(self, image) -> np.ndarray:
        img = np.asarray(image)
        if img.dtype != np.uint8:
            raise PyramidError(f"tiles must be uint8, got {img.dtype}")
        expect = (self.tile_size, self.tile_size, 3)
        if img.shape != expect:
            raise PyramidError(f"tile shape {img.shape} != {expect}")
        return np.ascontiguousarray(img)

    def put_tile(self, c: TileCoord, image, flush: bool = True) -> None:
        data = encode_png(self._check(image))
        try:
            _atomic_write_bytes(self.path(c), data)
        except OSError as e:
            raise StoreError(f"cannot write {self.path(c)}: {e}") from e
        with self._lock:
            self._coords.add(c)
            if flush:
                self._write_manifest(self._coords)

    def get_tile(self, c: TileCoord) -> np.ndarray | None:
        p = self.path(c)
        try:
            with Image.open(p) as im:
                im.load()
                arr = np.asarray(im.convert("RGB"))
        except FileNotFoundError:
            return None
        except OSError as e:
            raise StoreError(f"cannot read {p}: {e}") from e
        if arr.shape != (self.tile_size, self.tile_size, 3):
            raise StoreError(f"{p} has shape {arr.shape}")
        return arr

    def has_tile(self, c: TileCoord) -> bool:
        return self.path(c).exists()

    def coords(self, zoom: int | None = None) -> list[TileCoord]:
        with self._lock:
            out = sorted(self._coords)
        return [c for c in out if zoom is None or c.zoom == zoom]

    def zooms(self) -> list[int]:
        return sorted({c.zoom for c in self.coords()})

    # whole-region helpers

    def put_region(self, zoom: int, x0: int, y0: int, image: np.ndarray) -> list[TileCoord]:
        """Split ``image`` into tiles with the top-left one at tile ``(x0, y0)``."""
        ts = self.tile_size
        h, w = image.shape[:2]
        if h % ts or w % ts:
            raise PyramidError(f"region {h}x{w} is not a whole number of {ts}px tiles")
        written = []
        for j in range(h // ts):
            for i in range(w // ts):
                c = TileCoord(zoom, x0 + i, y0 + j)
                self.put_tile(c, image[j * ts : (j + 1) * ts, i * ts : (i + 1) * ts], flush=False)
                written.append(c)
        self.flush()
        return written

    def get_region(self, zoom: int, x0: int, y0: int, nx: int, ny: int) -> np.ndarray:
        ts = self.tile_size
        out = np.zeros((ny * ts, nx * ts, 3), dtype=np.uint8)
        for j in range(ny):
            for i in range(nx):
                tile = self.get_tile(TileCoord(zoom, x0 + i, y0 + j))
                if tile is None:
                    raise PyramidError(f"missing tile {(zoom, x0 + i, y0 + j)}")
                out[j * ts : (j + 1) * ts, i * ts : (i + 1) * ts] = tile
        return out
