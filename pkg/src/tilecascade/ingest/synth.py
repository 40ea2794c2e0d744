"""Procedural concentric pyramids with exact 2x2 box consistency between zooms.

The coarsest zoom is a sum of value-noise octaves. Each finer zoom refines
the centre half of the previous one: every coarse pixel becomes a 2x2 block
whose integer offsets sum to zero, so averaging the block gives back the
coarse pixel exactly. The offsets come from a fresh octave of noise at the
new zoom, which is how octaves are allotted per zoom.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom as nd_zoom

# per-channel mixing of the height field into RGB, plus a base colour
_RGB_GAIN = np.array([0.55, 0.75, 0.35])
_RGB_BASE = np.array([70.0, 60.0, 50.0])
# per-channel mixing of the refinement offsets
_DETAIL_GAIN = np.array([0.9, 1.0, 0.7])


class SynthError(ValueError):
    pass


def value_noise(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """Cubic interpolation of a random lattice with spacing ``cell`` pixels; unit variance-ish."""
    h, w = shape
    gh, gw = h // cell + 3, w // cell + 3
    lattice = rng.standard_normal((gh, gw))
    up = nd_zoom(lattice, cell, order=3, mode="grid-wrap")
    return up[cell : cell + h, cell : cell + w]


def fractal_field(shape, rng: np.random.Generator, octaves: int = 6, persistence: float = 0.6, base_cell: int = 64):
    """Octave sum of value noise from ``base_cell`` px down to 2 px cells."""
    out = np.zeros(shape)
    amp = 1.0
    cell = base_cell
    for _ in range(octaves):
        if cell < 2:
            break
        out += amp * value_noise(shape, cell, rng)
        amp *= persistence
        cell //= 2
    return out / (out.std() + 1e-12)


def _haar_blocks(coarse: np.ndarray, h: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Refine ``coarse`` (int) with integer Haar offsets, limited to keep pixels in [0, 255]."""
    room = np.minimum(coarse, 255 - coarse)
    total = np.abs(h) + np.abs(v) + np.abs(d)
    scale = np.where(total > room, room / np.maximum(total, 1e-12), 1.0)
    h = np.trunc(h * scale).astype(np.int64)
    v = np.trunc(v * scale).astype(np.int64)
    d = np.trunc(d * scale).astype(np.int64)
    out = np.empty((coarse.shape[0] * 2, coarse.shape[1] * 2), dtype=np.int64)
    out[0::2, 0::2] = coarse + h + v + d
    out[0::2, 1::2] = coarse - h + v - d
    out[1::2, 0::2] = coarse + h - v - d
    out[1::2, 1::2] = coarse - h - v + d
    return out


def refine(coarse: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Next zoom from the centre half of ``coarse`` (uint8, HxWx3); same pixel size."""
    H, W = coarse.shape[:2]
    if H % 4 or W % 4:
        raise SynthError("stack side must be divisible by 4")
    centre = coarse[H // 4 : H // 4 + H // 2, W // 4 : W // 4 + W // 2].astype(np.int64)
    shape = centre.shape[:2]
    fields = [amplitude * fractal_field(shape, rng, octaves=3, base_cell=8) for _ in range(3)]
    chans = [_haar_blocks(centre[..., c], *(g * _DETAIL_GAIN[c] for g in fields)) for c in range(3)]
    return np.stack(chans, axis=-1).astype(np.uint8)


def box_downsample(image: np.ndarray) -> np.ndarray:
    """2x2 mean; exact in integers for images built by :func:`refine`."""
    x = np.asarray(image, dtype=np.int64)
    s = x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]
    if np.any(s % 4):
        return s / 4.0
    return (s // 4).astype(np.asarray(image).dtype)


def centre_crop_half(image: np.ndarray) -> np.ndarray:
    H, W = image.shape[:2]
    return image[H // 4 : H // 4 + H // 2, W // 4 : W // 4 + W // 2]


def synth_pyramid(seed: int, zooms, stack_side: int = 2048, detail: float = 12.0, decay: float = 0.85) -> dict[int, np.ndarray]:
    """Concentric stack ``{zoom: uint8 (side, side, 3)}`` with exact box consistency.

    ``box_downsample(stack[z]) == centre_crop_half(stack[z - 1])`` for every
    consecutive pair. Refinement offsets start at ``detail`` grey levels and
    shrink by ``decay`` per zoom.
    """
    zooms = [int(z) for z in zooms]
    if not zooms or zooms != sorted(zooms) or len(set(zooms)) != len(zooms):
        raise SynthError("zooms must be strictly ascending")
    if zooms != list(range(zooms[0], zooms[0] + len(zooms))):
        raise SynthError("zooms must be contiguous")
    if stack_side % 4 or stack_side < 8:
        raise SynthError("stack side must be a multiple of 4 and at least 8")
    root = np.random.default_rng([seed, 0])
    height = fractal_field((stack_side, stack_side), root, persistence=0.7, base_cell=max(2, stack_side // 32))
    tint = fractal_field((stack_side, stack_side), root, octaves=3, base_cell=max(2, stack_side // 64))
    img = _RGB_BASE + 40.0 * height[..., None] * _RGB_GAIN + 12.0 * tint[..., None]
    base = np.clip(np.rint(img + 60.0), 0, 255).astype(np.uint8)
    out = {zooms[0]: base}
    for i, z in enumerate(zooms[1:], start=1):
        out[z] = refine(out[zooms[i - 1]], np.random.default_rng([seed, z]), detail * decay ** (i - 1))
    return out


def training_pairs(stack: dict[int, np.ndarray], low_side: int, rng: np.random.Generator, n: int):
    """``n`` aligned (low, high) crops with a x4 ratio taken from zooms two apart."""
    zs = sorted(stack)
    pairs = []
    for _ in range(n):
        z = zs[rng.integers(2, len(zs))] if len(zs) > 2 else zs[-1]
        lo_img, hi_img = stack[z - 2], stack[z]
        side = hi_img.shape[0]
        hi_side = 4 * low_side
        if hi_side > side:
            raise SynthError("crop larger than the stack")
        # hi pixel (y, x) at zoom z sits at lo pixel (side*3/8 + y/4, ...) at zoom z-2
        y = int(rng.integers(0, (side - hi_side) // 4 + 1)) * 4
        x = int(rng.integers(0, (side - hi_side) // 4 + 1)) * 4
        ly, lx = 3 * side // 8 + y // 4, 3 * side // 8 + x // 4
        pairs.append((lo_img[ly : ly + low_side, lx : lx + low_side], hi_img[y : y + hi_side, x : x + hi_side]))
    return pairs
