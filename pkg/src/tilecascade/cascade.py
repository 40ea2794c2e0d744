"""Base-layer generation followed by chained x4 super-resolution stages.

Geometry. A layer at zoom ``z`` is a rectangle of store tiles. The latent of
a layer has a quarter of its pixel size, so the latent of stage output zoom
``z + 2`` has exactly the pixel grid of the layer at ``z``: latent pixel
``(i, j)`` is conditioned on low-res pixel ``(i, j)``.

Randomness. Every random number is tied to an absolute position: the noise
for the latent block under store tile ``(zoom, x, y)`` comes from a
generator seeded with :func:`tile_seed`. Regenerating a larger region with
the same global seed therefore sees the same noise wherever the regions
overlap.

Chunking. A layer is sampled in windows: an absolute grid of ``chunk``
latent pixels, each grown by ``halo`` on every side and clipped to the
layer. Window latents are blended with linear ramps over their overlaps.
Windows that are not clipped are identical between runs whose regions both
contain them, which is what makes interior tiles reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math

import numpy as np

from ._parallel import parallel_map
from .codec import PATCH, DecodeTiling, LinearLatentCodec, tiled_decode, to_uint8
from .compose import DEFAULT_NEGATIVE_PROMPT, GuidanceConfig, guided_predict
from .denoise import ConditioningBundle, Denoiser
from .pyramid import PyramidMap, TileCoord, ground_resolution
from .schedule import Sampler, make_schedule
from .tiling import crop, fitted_layout, gaussian_weights, mixture_step

log = logging.getLogger(__name__)

SCALE = 4
ZOOM_STEP = 2


class CascadeError(ValueError):
    pass


def tile_seed(global_seed: int, zoom: int, x: int, y: int, stage: str) -> int:
    """Stable 64-bit seed for one store tile of one stage."""
    key = f"{int(global_seed)}|{int(zoom)}|{int(x)}|{int(y)}|{stage}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _default_sampler() -> Sampler:
    return Sampler(make_schedule(), 50)


@dataclasses.dataclass(frozen=True)
class StageConfig:
    """One sampling stage. ``name`` keys the noise streams; the base layer is a stage too."""

    name: str
    denoiser: Denoiser
    lambda_neg: float = 0.0
    neg_embedding: object = DEFAULT_NEGATIVE_PROMPT
    sampler: Sampler = dataclasses.field(default_factory=_default_sampler)
    tile: int = 128
    stride: int = 64
    scale: int = SCALE

    def __post_init__(self):
        if self.scale != SCALE:
            raise CascadeError(f"stage {self.name}: scale must be {SCALE}")
        if self.lambda_neg < 0:
            raise CascadeError(f"stage {self.name}: lambda_neg must be non-negative")
        if not 1 <= self.stride <= self.tile:
            raise CascadeError(f"stage {self.name}: need 1 <= stride <= tile")

    @property
    def guidance(self) -> GuidanceConfig | None:
        if self.lambda_neg == 0:
            return None
        return GuidanceConfig(lambda_neg=self.lambda_neg, neg_embedding=self.neg_embedding)


@dataclasses.dataclass(frozen=True)
class CascadeConfig:
    base_zoom: int
    base: StageConfig
    stages: tuple[StageConfig, ...]
    codec: LinearLatentCodec
    seed: int = 0
    tile_size: int = 256
    chunk: int = 256
    halo: int = 128
    budget: int | None = None
    std_fraction: float = 0.25
    decode: DecodeTiling = DecodeTiling()
    threads: int = 1

    def __post_init__(self):
        if self.tile_size % PATCH:
            raise CascadeError(f"tile_size must be a multiple of {PATCH}")
        if self.chunk < 1 or self.halo < 0:
            raise CascadeError("chunk must be positive and halo non-negative")
        for st in (self.base,) + tuple(self.stages):
            if self.halo < st.tile - st.stride and self.halo != 0:
                raise CascadeError(f"halo {self.halo} smaller than the tile overlap of stage {st.name}")
        names = [self.base.name] + [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise CascadeError("stage names must be unique")
        if self.final_zoom > 23:
            raise CascadeError(f"final zoom {self.final_zoom} beyond 23")
        if self.budget is not None and self.budget < self.window_area:
            raise CascadeError(
                f"budget of {self.budget} latent pixels is smaller than one chunk window ({self.window_area})"
            )

    @property
    def window_area(self) -> int:
        return (self.chunk + 2 * self.halo) ** 2

    @property
    def zooms(self) -> list[int]:
        return [self.base_zoom + ZOOM_STEP * i for i in range(len(self.stages) + 1)]

    @property
    def final_zoom(self) -> int:
        return self.base_zoom + ZOOM_STEP * len(self.stages)

    @property
    def total_scale(self) -> int:
        return SCALE ** len(self.stages)


@dataclasses.dataclass(frozen=True)
class Region:
    """Rectangle of store tiles ``[x0, x0+nx) x [y0, y0+ny)`` at ``zoom``."""

    zoom: int
    x0: int
    y0: int
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise CascadeError("region must contain at least one tile")
        TileCoord(self.zoom, self.x0, self.y0)
        TileCoord(self.zoom, self.x0 + self.nx - 1, self.y0 + self.ny - 1)

    def child(self) -> "Region":
        """The same footprint two zooms finer."""
        return Region(self.zoom + ZOOM_STEP, self.x0 * SCALE, self.y0 * SCALE, self.nx * SCALE, self.ny * SCALE)

    def coords(self) -> list[TileCoord]:
        return [TileCoord(self.zoom, x, y) for y in range(self.y0, self.y0 + self.ny) for x in range(self.x0, self.x0 + self.nx)]

    def contains(self, other: "Region") -> bool:
        return (
            self.zoom == other.zoom
            and self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x0 + other.nx <= self.x0 + self.nx
            and other.y0 + other.ny <= self.y0 + self.ny
        )


# ---------------------------------------------------------------------------
# noise field


def noise_field(
    seed: int, stage: str, zoom: int, tile_size: int, origin: tuple[int, int], shape: tuple[int, int, int], stream: int
) -> np.ndarray:
    """Unit Gaussian latent noise over ``shape`` at absolute latent ``origin``.

    Each store tile owns a ``tile_size/4`` square latent block filled from
    its own generator; ``stream`` selects the draw (0 for the initial
    latent, ``k + 1`` for the noise of sampler step ``k``).
    """
    b = tile_size // PATCH
    (ly, lx), (h, w, c) = origin, shape
    out = np.empty((h, w, c))
    for ty in range(ly // b, (ly + h - 1) // b + 1):
        for tx in range(lx // b, (lx + w - 1) // b + 1):
            rng = np.random.default_rng([tile_seed(seed, zoom, tx, ty, stage), stream])
            block = rng.standard_normal((b, b, c))
            y0, x0 = max(ly, ty * b), max(lx, tx * b)
            y1, x1 = min(ly + h, (ty + 1) * b), min(lx + w, (tx + 1) * b)
            out[y0 - ly : y1 - ly, x0 - lx : x1 - lx] = block[y0 - ty * b : y1 - ty * b, x0 - tx * b : x1 - tx * b]
    return out


# ---------------------------------------------------------------------------
# windows


@dataclasses.dataclass(frozen=True)
class Window:
    """Layer-relative latent window ``[y0, y1) x [x0, x1)``.

    ``clipped`` marks windows cut by, or flush with, the layer edge: their
    content or blend weights depend on where the layer ends.
    """

    y0: int
    x0: int
    y1: int
    x1: int
    clipped: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.y1 - self.y0, self.x1 - self.x0


def _axis_windows(origin: int, n: int, chunk: int, halo: int) -> list[tuple[int, int, bool]]:
    first = (origin // chunk) * chunk
    out = []
    c = first
    while c < origin + n:
        a, b = c - halo, c + chunk + halo
        lo, hi = max(a, origin), min(b, origin + n)
        out.append((lo - origin, hi - origin, lo != a or hi != b or lo == origin or hi == origin + n))
        c += chunk
    return out


def plan_windows(origin: tuple[int, int], shape: tuple[int, int], chunk: int, halo: int) -> list[Window]:
    """Chunk windows on the absolute ``chunk`` grid, in row-major order."""
    ys = _axis_windows(origin[0], shape[0], chunk, halo)
    xs = _axis_windows(origin[1], shape[1], chunk, halo)
    return [Window(y0, x0, y1, x1, cy or cx) for y0, y1, cy in ys for x0, x1, cx in xs]


def _ramp(lo: int, hi: int, n: int, band: int) -> np.ndarray:
    i = np.arange(hi - lo, dtype=np.float64)
    w = np.ones(hi - lo)
    if band > 0:
        if lo > 0:
            w = np.minimum(w, (i + 0.5) / band)
        if hi < n:
            w = np.minimum(w, (hi - lo - i - 0.5) / band)
    return w


def window_weights(win: Window, layer_shape: tuple[int, int], band: int) -> np.ndarray:
    return np.outer(_ramp(win.y0, win.y1, layer_shape[0], band), _ramp(win.x0, win.x1, layer_shape[1], band))


# ---------------------------------------------------------------------------
# one layer


def _sample_window(
    stage: StageConfig,
    cfg: CascadeConfig,
    zoom: int,
    origin: tuple[int, int],
    shape: tuple[int, int],
    low_res: np.ndarray | None,
    threads: int,
) -> np.ndarray:
    """Mixture-of-tiles sampling of one latent window at absolute latent ``origin``."""
    C = cfg.codec.channels
    h, w = shape
    layout = fitted_layout((h, w), stage.tile, stage.stride)
    weights = gaussian_weights(layout, cfg.std_fraction)
    guidance = stage.guidance
    z = noise_field(cfg.seed, stage.name, zoom, cfg.tile_size, origin, (h, w, C), 0)

    def predict_tile(zc, t, box):
        cond = None
        if low_res is not None:
            cond = ConditioningBundle(low_res=crop(low_res, box))
        return guided_predict(stage.denoiser, zc, t, cond, guidance)

    ts = stage.sampler.timesteps
    for k, (t_from, t_to) in enumerate(zip(ts[:-1], ts[1:])):
        noise = None
        if stage.sampler.stochastic and t_to > 0:
            noise = noise_field(cfg.seed, stage.name, zoom, cfg.tile_size, origin, (h, w, C), k + 1)
        z = mixture_step(predict_tile, z, t_from, t_to, weights, stage.sampler, noise, threads)
    return z


def sample_layer(
    stage: StageConfig,
    cfg: CascadeConfig,
    region: Region,
    low_res: np.ndarray | None = None,
    chunked: bool | None = None,
) -> np.ndarray:
    """Latent of ``region`` (zoom = region.zoom) for one stage.

    ``low_res`` is the uint8 layer two zooms coarser over the same footprint
    (its pixel grid equals the latent grid). ``chunked=None`` chunks unless
    a budget is set and the layer fits in it.
    """
    b = cfg.tile_size // PATCH
    origin = (region.y0 * b, region.x0 * b)
    shape = (region.ny * b, region.nx * b)
    if low_res is not None and low_res.shape[:2] != shape:
        raise CascadeError(f"conditioning {low_res.shape[:2]} misaligned with latent {shape}")
    if not _use_chunks(cfg, region, chunked):
        return _sample_window(stage, cfg, region.zoom, origin, shape, low_res, cfg.threads)

    windows = plan_windows(origin, shape, cfg.chunk, cfg.halo)
    outer = cfg.threads if len(windows) > 1 else 1
    inner = 1 if outer > 1 else cfg.threads

    def run(win: Window):
        lr = None if low_res is None else low_res[win.y0 : win.y1, win.x0 : win.x1]
        return _sample_window(stage, cfg, region.zoom, (origin[0] + win.y0, origin[1] + win.x0), win.shape, lr, inner)

    latents = parallel_map(run, windows, outer)
    band = 2 * cfg.halo
    acc = np.zeros(shape + (cfg.codec.channels,))
    norm = np.zeros(shape)
    for win, lat in zip(windows, latents):
        wt = window_weights(win, shape, band)
        acc[win.y0 : win.y1, win.x0 : win.x1] += wt[..., None] * lat
        norm[win.y0 : win.y1, win.x0 : win.x1] += wt
    return acc / norm[..., None]


def decode_layer(cfg: CascadeConfig, latent: np.ndarray, origin: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Decode in blocks of the absolute chunk grid and quantise to uint8.

    The codec is patch-local, so blocking changes nothing except that each
    block is computed identically in every run whose region contains it.
    ``origin`` is the absolute latent position of ``latent[0, 0]``.
    """
    h, w = latent.shape[:2]
    out = np.empty((h * PATCH, w * PATCH, 3), dtype=np.uint8)
    ys = [y for y in range(h) if y == 0 or (origin[0] + y) % cfg.chunk == 0] + [h]
    xs = [x for x in range(w) if x == 0 or (origin[1] + x) % cfg.chunk == 0] + [w]
    for y0, y1 in zip(ys[:-1], ys[1:]):
        for x0, x1 in zip(xs[:-1], xs[1:]):
            dec = tiled_decode(cfg.codec, latent[y0:y1, x0:x1], cfg.decode)
            out[y0 * PATCH : y1 * PATCH, x0 * PATCH : x1 * PATCH] = to_uint8(dec)
    return out


def _latent_origin(cfg: CascadeConfig, region: Region) -> tuple[int, int]:
    b = cfg.tile_size // PATCH
    return region.y0 * b, region.x0 * b


def _use_chunks(cfg: CascadeConfig, region: Region, chunked: bool | None) -> bool:
    if chunked is not None:
        return chunked
    b = cfg.tile_size // PATCH
    return cfg.budget is None or region.ny * region.nx * b * b > cfg.budget


def _check_block_alignment(cfg: CascadeConfig) -> None:
    b = cfg.tile_size // PATCH
    if cfg.chunk % b:
        raise CascadeError(f"chunk {cfg.chunk} must be a multiple of the per-tile latent block {b}")


def generate_base(cfg: CascadeConfig, region: Region, chunked: bool | None = None) -> np.ndarray:
    """uint8 base layer over ``region`` (which must be at ``cfg.base_zoom``)."""
    if region.zoom != cfg.base_zoom:
        raise CascadeError(f"base region at zoom {region.zoom}, config base zoom {cfg.base_zoom}")
    _check_block_alignment(cfg)
    return decode_layer(cfg, sample_layer(cfg.base, cfg, region, None, chunked), _latent_origin(cfg, region))


def superres_stage(
    low_res: np.ndarray, stage: StageConfig, cfg: CascadeConfig, low_region: Region, chunked: bool | None = None
) -> np.ndarray:
    """x4 layer over the footprint of ``low_region`` conditioned on ``low_res`` (uint8)."""
    low_res = np.asarray(low_res)
    ts = cfg.tile_size
    if low_res.shape[:2] != (low_region.ny * ts, low_region.nx * ts):
        raise CascadeError(f"low-res layer {low_res.shape[:2]} does not match its region")
    _check_block_alignment(cfg)
    region = low_region.child()
    latent = sample_layer(stage, cfg, region, low_res, chunked)
    return decode_layer(cfg, latent, _latent_origin(cfg, region))


@dataclasses.dataclass
class WorldResult:
    regions: dict[int, Region]
    layers: dict[int, np.ndarray]
    stable: dict[int, np.ndarray]

    def stable_tiles(self, zoom: int) -> list[TileCoord]:
        r = self.regions[zoom]
        mask = self.stable[zoom]
        return [TileCoord(zoom, r.x0 + i, r.y0 + j) for j, i in zip(*np.nonzero(mask))]


def _stable_latent_mask(
    cfg: CascadeConfig, region: Region, low_ok: np.ndarray | None, chunked: bool | None
) -> np.ndarray:
    """Latent pixels whose value is the same in any run over a region containing ``region``.

    A pixel qualifies if every window covering it is unclipped and, for a
    conditioned stage, sees only qualifying low-res pixels.
    """
    b = cfg.tile_size // PATCH
    origin = (region.y0 * b, region.x0 * b)
    shape = (region.ny * b, region.nx * b)
    if not _use_chunks(cfg, region, chunked):
        return np.zeros(shape, dtype=bool)
    bad = np.zeros(shape, dtype=bool)
    for win in plan_windows(origin, shape, cfg.chunk, cfg.halo):
        sl = (slice(win.y0, win.y1), slice(win.x0, win.x1))
        if win.clipped or (low_ok is not None and not low_ok[sl].all()):
            bad[sl] = True
    return ~bad


def _tile_mask(pixel_ok: np.ndarray, tile_size: int) -> np.ndarray:
    h, w = pixel_ok.shape
    return pixel_ok.reshape(h // tile_size, tile_size, w // tile_size, tile_size).all(axis=(1, 3))


def generate_world(
    extent: Region, cfg: CascadeConfig, store: PyramidMap | None = None, chunked: bool | None = None
) -> WorldResult:
    """Base layer over ``extent`` then every stage, persisting each layer as it is finished."""
    if store is not None and store.tile_size != cfg.tile_size:
        raise CascadeError(f"store tile size {store.tile_size} != config tile size {cfg.tile_size}")
    regions, layers, stable = {}, {}, {}
    region = extent
    img = generate_base(cfg, region, chunked)
    lat_ok = _stable_latent_mask(cfg, region, None, chunked)
    for i in range(len(cfg.stages) + 1):
        if i > 0:
            low_region = region
            region = region.child()
            img = superres_stage(layers[low_region.zoom], cfg.stages[i - 1], cfg, low_region, chunked)
            lat_ok = _stable_latent_mask(cfg, region, pix_ok, chunked)
        pix_ok = np.repeat(np.repeat(lat_ok, PATCH, axis=0), PATCH, axis=1)
        regions[region.zoom] = region
        layers[region.zoom] = img
        stable[region.zoom] = _tile_mask(pix_ok, cfg.tile_size)
        if store is not None:
            store.put_region(region.zoom, region.x0, region.y0, img)
        log.info("zoom %d: %dx%d px (%.3f m/px at the equator)", region.zoom, img.shape[1], img.shape[0],
                 ground_resolution(region.zoom, 0.0))
    return WorldResult(regions, layers, stable)


# ---------------------------------------------------------------------------
# direct-generation ablation


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[:2]
    if h % factor or w % factor:
        raise CascadeError(f"{h}x{w} not divisible by {factor}")
    return x.reshape(h // factor, factor, w // factor, factor, *x.shape[2:]).mean(axis=(1, 3))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def low_frequency_power(image: np.ndarray, cutoff: float) -> float:
    """Fraction of (mean-removed) spectral power at radial frequency below ``cutoff`` cycles/px."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=-1)
    x = x - x.mean()
    p = np.abs(np.fft.fft2(x)) ** 2
    fy = np.fft.fftfreq(x.shape[0])[:, None]
    fx = np.fft.fftfreq(x.shape[1])[None, :]
    r = np.hypot(fy, fx)
    total = p.sum()
    return float(p[r < cutoff].sum() / total) if total > 0 else 0.0


def ablate_direct(extent: Region, cfg: CascadeConfig, direct: StageConfig, chunked: bool | None = None) -> dict:
    """Cascaded world versus the final zoom sampled directly with ``direct``.

    Both paths share the global seed; the direct path draws from its own
    stage-named noise streams at the final zoom.
    """
    world = generate_world(extent, cfg, None, chunked)
    final_region = world.regions[cfg.final_zoom]
    direct_img = decode_layer(
        cfg, sample_layer(direct, cfg, final_region, None, chunked), _latent_origin(cfg, final_region)
    )
    cascaded = world.layers[cfg.final_zoom]
    base = world.layers[cfg.base_zoom]
    f = cfg.total_scale
    cutoff = 0.5 / f
    return {
        "cascaded": cascaded,
        "direct": direct_img,
        "base": base,
        "report": {
            "scale": f,
            "r_cascaded_vs_base": pearson(box_downsample(cascaded, f), base),
            "r_direct_vs_base": pearson(box_downsample(direct_img, f), base),
            "low_freq_cutoff": cutoff,
            "low_freq_power_cascaded": low_frequency_power(cascaded, cutoff),
            "low_freq_power_direct": low_frequency_power(direct_img, cutoff),
        },
    }
