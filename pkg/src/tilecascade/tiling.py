"""Overlapping-tile denoising over a latent canvas.

A tile predictor has the signature ``predict_tile(z_crop, t, box) -> eps_crop``
where ``box = (y0, x0, y1, x1)`` locates the crop on the canvas; it is where
per-tile conditioning and guidance are applied.

Four strategies are provided for comparison:

* ``naive_stitch``: independent trajectories on a non-overlapping grid, pasted.
* ``gaussian_composite``: independent trajectories on overlapping tiles, final
  latents blended with normalised Gaussian weights. Tile 0 starts from its
  crop of ``z_T``; every other tile starts from its own noise sub-stream, so
  overlapping tiles do not share their starting noise.
* ``latent_average``: per-step uniform average of every tile's stepped latent
  (the closed-form least-squares reconciliation).
* ``mixture``: per-step Gaussian blend of the tiles' noise predictions followed
  by a single canvas-wide sampler step.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable

import numpy as np

from ._parallel import parallel_map
from .schedule import Sampler

STRATEGIES = ("naive_stitch", "gaussian_composite", "latent_average", "mixture")

Box = tuple[int, int, int, int]


class TilingError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _origins(n: int, tile: int, stride: int) -> list[int]:
    if tile == n:
        return [0]
    out = list(range(0, n - tile, stride))
    out.append(n - tile)
    return out


@dataclasses.dataclass(frozen=True)
class TileLayout:
    canvas: tuple[int, int]
    tile: tuple[int, int]
    stride: tuple[int, int]
    ys: tuple[int, ...]
    xs: tuple[int, ...]

    @property
    def boxes(self) -> list[Box]:
        """Tile boxes in row-major order; this order fixes the reduction order."""
        th, tw = self.tile
        return [(y, x, y + th, x + tw) for y in self.ys for x in self.xs]

    def __len__(self) -> int:
        return len(self.ys) * len(self.xs)

    def boundaries(self) -> tuple[list[int], list[int]]:
        """Interior tile-edge lines: rows and columns where some tile starts or ends."""
        H, W = self.canvas
        th, tw = self.tile
        rows = sorted({e for y in self.ys for e in (y, y + th) if 0 < e < H})
        cols = sorted({e for x in self.xs for e in (x, x + tw) if 0 < e < W})
        return rows, cols

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.canvas, dtype=np.int64)
        for y0, x0, y1, x1 in self.boxes:
            cov[y0:y1, x0:x1] += 1
        return cov


def build_layout(canvas, tile=128, stride=64) -> TileLayout:
    """Grid of tiles at multiples of ``stride``; the last row/column is clamped to the edge."""
    H, W = _pair(canvas)
    th, tw = _pair(tile)
    sh, sw = _pair(stride)
    if th > H or tw > W:
        raise TilingError(f"tile {th}x{tw} larger than canvas {H}x{W}")
    if min(th, tw, sh, sw) < 1 or sh > th or sw > tw:
        raise TilingError(f"need 1 <= stride <= tile, got tile {th}x{tw} stride {sh}x{sw}")
    return TileLayout((H, W), (th, tw), (sh, sw), tuple(_origins(H, th, sh)), tuple(_origins(W, tw, sw)))


def fitted_layout(canvas, tile=128, stride=64) -> TileLayout:
    """Like :func:`build_layout` but shrinks the tile to the canvas when it is smaller."""
    H, W = _pair(canvas)
    th, tw = _pair(tile)
    sh, sw = _pair(stride)
    th, tw = min(th, H), min(tw, W)
    return build_layout((H, W), (th, tw), (min(sh, th), min(sw, tw)))


@dataclasses.dataclass(frozen=True)
class WeightMap:
    """Per-tile weight arrays (tile-shaped) that sum to 1 at every canvas pixel."""

    layout: TileLayout
    tiles: tuple[np.ndarray, ...]

    def total(self) -> np.ndarray:
        out = np.zeros(self.layout.canvas)
        for (y0, x0, y1, x1), w in zip(self.layout.boxes, self.tiles):
            out[y0:y1, x0:x1] += w
        return out


def _gauss_1d(n: int, std: float) -> np.ndarray:
    c = (n - 1) / 2.0
    i = np.arange(n, dtype=np.float64)
    return np.exp(-((i - c) ** 2) / (2.0 * std * std))


def gaussian_weights(layout: TileLayout, std_fraction: float = 0.25) -> WeightMap:
    """Gaussian centred on each tile (std = ``std_fraction * tile``), normalised per pixel."""
    if std_fraction <= 0:
        raise TilingError("std_fraction must be positive")
    th, tw = layout.tile
    raw = np.outer(_gauss_1d(th, std_fraction * th), _gauss_1d(tw, std_fraction * tw))
    return _normalise(layout, [raw] * len(layout))


def uniform_weights(layout: TileLayout) -> WeightMap:
    return _normalise(layout, [np.ones(layout.tile)] * len(layout))


def _normalise(layout: TileLayout, raws) -> WeightMap:
    norm = np.zeros(layout.canvas)
    for (y0, x0, y1, x1), r in zip(layout.boxes, raws):
        norm[y0:y1, x0:x1] += r
    if np.any(norm <= 0):
        raise TilingError("layout leaves canvas pixels uncovered")
    tiles = tuple(r / norm[y0:y1, x0:x1] for (y0, x0, y1, x1), r in zip(layout.boxes, raws))
    return WeightMap(layout, tiles)


def translate(tile_array: np.ndarray, box: Box, canvas: tuple[int, int]) -> np.ndarray:
    """Zero-pad a tile-shaped array into canvas coordinates."""
    y0, x0, y1, x1 = box
    out = np.zeros(tile_array.shape[:-3] + tuple(canvas) + tile_array.shape[-1:])
    out[..., y0:y1, x0:x1, :] = tile_array
    return out


def crop(z: np.ndarray, box: Box) -> np.ndarray:
    y0, x0, y1, x1 = box
    return z[..., y0:y1, x0:x1, :]


def aggregate(preds, weights: WeightMap) -> np.ndarray:
    """Weighted sum of tile predictions into the canvas, in fixed tile order."""
    layout = weights.layout
    if len(preds) != len(layout):
        raise TilingError(f"{len(preds)} predictions for {len(layout)} tiles")
    first = preds[0]
    out = np.zeros(first.shape[:-3] + tuple(layout.canvas) + first.shape[-1:])
    covered = np.zeros(layout.canvas, dtype=bool)
    for (y0, x0, y1, x1), w, p in zip(layout.boxes, weights.tiles, preds):
        out[..., y0:y1, x0:x1, :] += w[:, :, None] * p
        covered[y0:y1, x0:x1] = True
    if not covered.all():
        raise TilingError("uncovered canvas pixel")
    return out


def _tile_predictions(predict_tile, z, t, layout, threads):
    return parallel_map(lambda box: np.asarray(predict_tile(crop(z, box), t, box)), layout.boxes, threads)


def mixture_step(
    predict_tile: Callable,
    z: np.ndarray,
    t_from: int,
    t_to: int,
    weights: WeightMap,
    sampler: Sampler,
    noise: np.ndarray | None = None,
    threads: int = 1,
) -> np.ndarray:
    """One reverse step on the whole canvas using the Gaussian-blended noise estimate."""
    preds = _tile_predictions(predict_tile, z, t_from, weights.layout, threads)
    eps = aggregate(preds, weights)
    return sampler.step(z, eps, t_from, t_to, noise)


def _noise_for(sampler, noise_source, k, t_to, shape):
    if sampler.stochastic and t_to > 0:
        return noise_source(k, shape)
    return None


def rng_noise(rng: np.random.Generator):
    return lambda k, shape: rng.standard_normal(shape)


def sample_tiled(
    predict_tile: Callable,
    z_T: np.ndarray,
    sampler: Sampler,
    layout: TileLayout,
    std_fraction: float = 0.25,
    noise_source=None,
    threads: int = 1,
) -> np.ndarray:
    """Full mixture trajectory from ``z_T`` to ``t = 0``."""
    return run_strategy("mixture", predict_tile, z_T, sampler, layout, std_fraction, noise_source, threads)


def sample_untiled(predict, z_T, sampler: Sampler, noise_source=None) -> np.ndarray:
    """Reference path: ``predict(z, t)`` on the whole canvas."""
    z = np.asarray(z_T, dtype=np.float64)
    ts = sampler.timesteps
    for k, (t_from, t_to) in enumerate(zip(ts[:-1], ts[1:])):
        noise = _noise_for(sampler, noise_source, k, t_to, z.shape)
        z = sampler.step(z, predict(z, t_from), t_from, t_to, noise)
    return z


def run_strategy(
    strategy: str,
    predict_tile: Callable,
    z_T: np.ndarray,
    sampler: Sampler,
    layout: TileLayout,
    std_fraction: float = 0.25,
    noise_source=None,
    threads: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """Sample the canvas with one of :data:`STRATEGIES`.

    All strategies start from ``z_T`` and (for stochastic samplers) consume
    the same canvas-level noise draws, cropped per tile where tiles evolve
    independently. ``seed`` keys the per-tile starting noise of
    ``gaussian_composite`` tiles after the first.
    """
    if strategy not in STRATEGIES:
        raise TilingError(f"unknown strategy {strategy!r}")
    z = np.asarray(z_T, dtype=np.float64)
    ts = sampler.timesteps
    steps = list(enumerate(zip(ts[:-1], ts[1:])))
    if sampler.stochastic and noise_source is None:
        raise TilingError("stochastic sampler needs a noise source")

    if strategy == "mixture":
        weights = gaussian_weights(layout, std_fraction)
        for k, (t_from, t_to) in steps:
            noise = _noise_for(sampler, noise_source, k, t_to, z.shape)
            z = mixture_step(predict_tile, z, t_from, t_to, weights, sampler, noise, threads)
        return z

    if strategy == "latent_average":
        weights = uniform_weights(layout)
        for k, (t_from, t_to) in steps:
            noise = _noise_for(sampler, noise_source, k, t_to, z.shape)
            preds = _tile_predictions(predict_tile, z, t_from, layout, threads)
            stepped = [
                sampler.step(crop(z, box), p, t_from, t_to, None if noise is None else crop(noise, box))
                for box, p in zip(layout.boxes, preds)
            ]
            z = aggregate(stepped, weights)
        return z

    if strategy == "naive_stitch":
        layout = build_layout(layout.canvas, layout.tile, layout.tile)
    states = [crop(z, box).copy() for box in layout.boxes]
    if strategy == "gaussian_composite":
        for k in range(1, len(states)):
            states[k] = np.random.default_rng([seed, k]).standard_normal(states[k].shape)
    for k, (t_from, t_to) in steps:
        noise = _noise_for(sampler, noise_source, k, t_to, z.shape)

        def advance(item):
            box, s = item
            eps = np.asarray(predict_tile(s, t_from, box))
            return sampler.step(s, eps, t_from, t_to, None if noise is None else crop(noise, box))

        states = parallel_map(advance, list(zip(layout.boxes, states)), threads)
    if strategy == "naive_stitch":
        out = np.empty_like(z)
        for box, s in zip(layout.boxes, states):
            out[..., box[0] : box[2], box[1] : box[3], :] = s
        return out
    return aggregate(states, gaussian_weights(layout, std_fraction))


def stationary_tile_predictor(denoiser) -> Callable:
    """Adapter for denoisers that need no per-tile conditioning."""
    return lambda z, t, box: denoiser.predict(z, t)


def strategy_layout(strategy: str, layout: TileLayout) -> TileLayout:
    """The tile grid whose edges are where ``strategy`` can produce seams."""
    if strategy == "naive_stitch":
        return build_layout(layout.canvas, layout.tile, layout.tile)
    return layout

