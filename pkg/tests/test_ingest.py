import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from tilecascade.ingest import (
    IngestError,
    MockTileServer,
    PyramidSpec,
    RateLimiter,
    TileClient,
    TileServerSpec,
    build_dataset,
    classify_availability,
    fetch_pyramid,
    pattern_region,
)
from tilecascade.ingest.client import (
    URBAN_JITTER_M,
    check_latitude,
    covering_tiles,
    haversine_m,
    jittered_center,
    sample_locations,
    stack_window,
    training_eligible,
)
from tilecascade.ingest.limiter import max_in_window
from tilecascade.pyramid import PyramidMap, TileCoord

TS = 32


class FakeClock:
    def __init__(self):
        self.t = 0.0
        self.lock = threading.Lock()

    def __call__(self):
        return self.t

    def sleep(self, dt):
        with self.lock:
            self.t += dt


def _client(template, rate=1e6, retries=2, clock=None):
    spec = TileServerSpec(template, rate=rate, retries=retries, backoff=0.0, tile_size=TS)
    limiter = RateLimiter(rate, clock=clock, sleep=clock.sleep) if clock else None
    return TileClient(spec, limiter=limiter, sleep=lambda s: None)


@pytest.fixture
def server():
    with MockTileServer(max_zoom=20, tile_size=TS) as srv:
        yield srv


def test_spec_validation():
    with pytest.raises(IngestError):
        TileServerSpec("http://h/{z}/{x}.png")
    with pytest.raises(IngestError):
        TileServerSpec("http://h/{quadkey}/{z}/{x}/{y}.png")
    with pytest.raises(IngestError):
        TileServerSpec("http://h/{quadkey}", rate=0)
    spec = TileServerSpec("http://h/q/{quadkey}.png?k={key}", api_key="abc")
    assert spec.url_for(TileCoord(3, 3, 5)) == "http://h/q/213.png?k=abc"
    with pytest.raises(IngestError):
        PyramidSpec(0.0, 0.0, zooms=(10, 12))


def test_latitude_clamp():
    check_latitude(66.0)
    check_latitude(-66.0)
    for lat in (70.0, -66.01):
        with pytest.raises(IngestError):
            check_latitude(lat)
    lats = [lat for lat, _ in sample_locations(2000, np.random.default_rng(0))]
    assert max(lats) <= 66 and min(lats) >= -66


def test_latitude_70_rejected_before_any_request(tmp_path, server):
    client = _client(server.zxy_template)
    with pytest.raises(IngestError):
        fetch_pyramid(client, PyramidSpec(70.0, 10.0, (10,), 64), PyramidMap(tmp_path, TS))
    with pytest.raises(IngestError):
        classify_availability(client, 70.0, 10.0)
    assert server.requests == []


def test_urban_jitter_within_5km():
    rng = np.random.default_rng(1)
    for lat, lon in [(0.0, 0.0), (60.0, 30.0), (-45.0, 170.0)]:
        d = [haversine_m(lat, lon, *jittered_center(lat, lon, URBAN_JITTER_M, rng)) for _ in range(500)]
        assert max(d) <= 5000.0 and max(d) > 4000.0


@pytest.mark.parametrize("template", ["zxy_template", "quadkey_template"])
def test_stack_matches_pattern_mosaic(tmp_path, server, template):
    client = _client(getattr(server, template))
    store = PyramidMap(tmp_path, TS)
    spec = PyramidSpec(37.77, -122.42, (12, 13, 14), 64)
    man = fetch_pyramid(client, spec, store)
    assert man["complete"]
    for z in spec.zooms:
        x0, y0 = stack_window(spec.lat, spec.lon, z, 64, TS)
        entry = man["zooms"][str(z)]
        assert entry["origin"] == [x0, y0]
        stack = np.asarray(Image.open(tmp_path / "stacks" / entry["path"]))
        assert np.array_equal(stack, pattern_region(z, x0, y0, 64, 64))
        assert len(entry["tiles"]) == len(covering_tiles(x0, y0, 64, z, TS))


def test_fetch_is_resumable(tmp_path, server):
    client = _client(server.zxy_template)
    store = PyramidMap(tmp_path, TS)
    spec = PyramidSpec(10.0, 20.0, (11, 12), 64)
    fetch_pyramid(client, spec, store)
    n_first = len(server.requests)
    before = {c: store.path(c).read_bytes() for c in store.coords()}
    fetch_pyramid(client, spec, store)
    assert len(server.requests) == n_first
    victim = sorted(before)[1]
    store.path(victim).unlink()
    fetch_pyramid(client, spec, store)
    assert len(server.requests) == n_first + 1
    assert {c: store.path(c).read_bytes() for c in store.coords()} == before


def test_retries_then_success(tmp_path):
    with MockTileServer(tile_size=TS, fail_first=2) as srv:
        client = _client(srv.zxy_template, retries=3)
        img = client.fetch(TileCoord(5, 3, 4))
        assert np.array_equal(img, pattern_region(5, 96, 128, TS, TS))
        assert len(srv.requests) == 3


def test_persistent_failure_is_recorded(tmp_path):
    spec = PyramidSpec(0.5, 0.5, (4,), 32)
    x0, y0 = stack_window(spec.lat, spec.lon, 4, 32, TS)
    bad = covering_tiles(x0, y0, 32, 4, TS)[0]
    with MockTileServer(tile_size=TS, always_fail={f"/tiles/4/{bad.x}/{bad.y}.png"}) as srv:
        man = fetch_pyramid(_client(srv.zxy_template, retries=1), spec, PyramidMap(tmp_path, TS))
    entry = man["zooms"]["4"]
    assert not man["complete"] and "path" not in entry
    assert entry["errors"][0]["tile"] == [4, bad.x, bad.y] and "503" in entry["errors"][0]["error"]


@pytest.mark.parametrize("sentinel", [False, True])
@pytest.mark.parametrize("max_zoom,expected", [(20, "high"), (19, "mid"), (13, "coarse"), (12, "unavailable")])
def test_availability_classes(max_zoom, expected, sentinel):
    with MockTileServer(max_zoom=max_zoom, tile_size=TS, sentinel=sentinel) as srv:
        assert classify_availability(_client(srv.zxy_template), 48.85, 2.35) == expected
    assert training_eligible(expected) == (expected in ("mid", "high"))


def test_ambiguous_probe_is_unknown():
    with MockTileServer(tile_size=TS, fail_first=100) as srv:
        assert classify_availability(_client(srv.zxy_template, retries=0), 0.0, 0.0) == "unknown"


def test_build_dataset_excludes_ocean(tmp_path):
    # western hemisphere only has coarse imagery
    def max_zoom(c):
        return 13 if c.x < (1 << c.zoom) // 2 else 19

    with MockTileServer(max_zoom=max_zoom, tile_size=TS) as srv:
        store = PyramidMap(tmp_path, TS)
        doc = build_dataset(_client(srv.zxy_template), [(0.0, -30.0), (20.0, 100.0)], store,
                            zooms=(17, 18, 19, 20), stack_side=64)
    assert [e["class"] for e in doc["stacks"]] == ["coarse", "mid"]
    assert "stack" not in doc["stacks"][0]
    assert list(doc["stacks"][1]["stack"]["zooms"]) == ["17", "18", "19"]
    assert json.loads((tmp_path / "dataset.json").read_text()) == doc


def test_rate_limiter_fake_clock():
    clock = FakeClock()
    lim = RateLimiter(5, clock=clock, sleep=clock.sleep)
    stamps = [lim.acquire() for _ in range(23)]
    assert max_in_window(stamps) <= 5
    assert stamps[4] == 0.0 and stamps[5] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        RateLimiter(0)


@settings(max_examples=30, deadline=None)
@given(rate=st.integers(1, 20), gaps=st.lists(st.floats(0, 0.7), min_size=1, max_size=60))
def test_rate_limiter_never_exceeds_budget(rate, gaps):
    clock = FakeClock()
    lim = RateLimiter(rate, clock=clock, sleep=clock.sleep)
    stamps = []
    for g in gaps:
        clock.sleep(g)
        stamps.append(lim.acquire())
    assert max_in_window(stamps) <= rate


def test_rate_limiter_under_threads():
    clock = FakeClock()
    lim = RateLimiter(4, clock=clock, sleep=clock.sleep)
    stamps = []
    lock = threading.Lock()

    def worker():
        for _ in range(10):
            t = lim.acquire()
            with lock:
                stamps.append(t)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(stamps) == 40 and max_in_window(stamps) <= 4


def test_client_requests_respect_limiter(tmp_path, server):
    clock = FakeClock()
    client = _client(server.zxy_template, rate=3, clock=clock)
    fetch_pyramid(client, PyramidSpec(1.0, 1.0, (8, 9), 64), PyramidMap(tmp_path, TS))
    stamps = client.limiter.history()
    assert len(server.requests) >= 8
    assert max_in_window(stamps) <= 3
