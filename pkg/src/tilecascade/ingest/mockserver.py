"""Local HTTP tile server used by the ingestion tests and the ``ingest --mock`` CLI path.

Tile content is a pure function of the global pixel position, so an
assembled mosaic can be checked against :func:`pattern_region` directly.
"""

from __future__ import annotations

import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..pyramid import TileCoord, encode_png, from_quadkey

SENTINEL_HEADER = "X-Tile-Info"
SENTINEL_VALUE = "no-tile"

_ZXY = re.compile(r"^/tiles/(\d+)/(\d+)/(\d+)\.png$")
_QUAD = re.compile(r"^/q/([0-3]+)\.png$")


def pattern_region(zoom: int, x0: int, y0: int, h: int, w: int, checker: int = 16) -> np.ndarray:
    """Pixels ``[y0, y0+h) x [x0, x0+w)`` of the global test pattern at ``zoom``."""
    gy = np.arange(y0, y0 + h, dtype=np.int64)[:, None]
    gx = np.arange(x0, x0 + w, dtype=np.int64)[None, :]
    cell = ((gx // checker) + (gy // checker)) % 2
    r = (gx * 7 + gy * 3) % 256
    g = (gy * 5 + zoom * 31) % 256
    b = (cell * 128 + (gx // checker) * 11 + zoom) % 256
    return np.stack(np.broadcast_arrays(r, g, b), axis=-1).astype(np.uint8)


def pattern_tile(c: TileCoord, tile_size: int = 256) -> np.ndarray:
    return pattern_region(c.zoom, c.x * tile_size, c.y * tile_size, tile_size, tile_size)


class MockTileServer:
    """Threaded HTTP server serving the test pattern.

    ``max_zoom`` may be an int or a callable ``(TileCoord) -> int`` so
    availability can vary by location. Requests above it get 404, or 200 with
    the sentinel header when ``sentinel`` is set. ``fail_first`` makes the
    first N requests for each path answer 503.
    """

    def __init__(self, max_zoom=20, tile_size: int = 256, sentinel: bool = False, fail_first: int = 0,
                 always_fail: set | None = None):
        self.max_zoom = max_zoom
        self.tile_size = tile_size
        self.sentinel = sentinel
        self.fail_first = fail_first
        self.always_fail = set(always_fail or ())
        self.requests: list[tuple[float, str]] = []
        self._failures: dict[str, int] = {}
        self._lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # URL templates

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def zxy_template(self) -> str:
        return self.base_url + "/tiles/{z}/{x}/{y}.png"

    @property
    def quadkey_template(self) -> str:
        return self.base_url + "/q/{quadkey}.png"

    def _max_zoom_at(self, c: TileCoord) -> int:
        return self.max_zoom(c) if callable(self.max_zoom) else int(self.max_zoom)

    def _respond(self, path: str):
        with self._lock:
            self.requests.append((time.monotonic(), path))
            n = self._failures.get(path, 0)
            if n < self.fail_first or path in self.always_fail:
                self._failures[path] = n + 1
                return 503, {}, b"busy"
        m = _ZXY.match(path)
        try:
            if m:
                c = TileCoord(int(m.group(1)), int(m.group(2)), int(m.group(3)))
            elif _QUAD.match(path):
                c = from_quadkey(_QUAD.match(path).group(1))
            else:
                return 400, {}, b"bad path"
        except ValueError:
            return 400, {}, b"bad coordinate"
        if c.zoom > self._max_zoom_at(c):
            if self.sentinel:
                blank = np.zeros((self.tile_size, self.tile_size, 3), dtype=np.uint8)
                return 200, {SENTINEL_HEADER: SENTINEL_VALUE}, encode_png(blank)
            return 404, {}, b"no tile"
        return 200, {"Content-Type": "image/png"}, encode_png(pattern_tile(c, self.tile_size))

    def start(self) -> "MockTileServer":
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802
                status, headers, body = server._respond(self.path.split("?")[0])
                self.send_response(status)
                for k, v in headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> "MockTileServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
