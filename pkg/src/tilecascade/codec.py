"""Linear latent codec: 4x4x3 pixel patches <-> C latent channels.

The codec is a per-patch affine map, so a latent pixel decodes to exactly one
4x4 RGB patch. That makes tiled decoding exact rather than approximate.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

PATCH = 4
PATCH_DIM = PATCH * PATCH * 3
FORMAT_VERSION = 1


class CodecError(ValueError):
    pass


def to_float_image(image) -> np.ndarray:
    """uint8 RGB -> float64 in [0, 1]; float input is passed through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64, copy=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def image_to_patches(image: np.ndarray) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/4, W/4, 48)."""
    image = np.asarray(image)
    *lead, H, W, ch = image.shape
    if ch != 3:
        raise CodecError(f"expected 3 channels, got {ch}")
    if H % PATCH or W % PATCH:
        raise CodecError(f"image dims {H}x{W} not divisible by {PATCH}")
    x = image.reshape(*lead, H // PATCH, PATCH, W // PATCH, PATCH, 3)
    n = len(lead)
    x = np.moveaxis(x, n + 1, n + 2)
    return x.reshape(*lead, H // PATCH, W // PATCH, PATCH_DIM)


def patches_to_image(patches: np.ndarray) -> np.ndarray:
    *lead, h, w, d = patches.shape
    if d != PATCH_DIM:
        raise CodecError(f"expected {PATCH_DIM}-dim patches, got {d}")
    n = len(lead)
    x = patches.reshape(*lead, h, w, PATCH, PATCH, 3)
    x = np.moveaxis(x, n + 2, n + 1)
    return x.reshape(*lead, h * PATCH, w * PATCH, 3)


@dataclasses.dataclass(frozen=True)
class LinearLatentCodec:
    """Affine patch codec.

    ``encode``: ``z = A @ (p - mean)``; ``decode``: ``p = B @ z + mean`` where
    ``p`` is a flattened 4x4x3 patch. ``B @ A`` is an orthogonal projection
    onto the retained subspace.
    """

    mean: np.ndarray  # (48,)
    A: np.ndarray  # (C, 48)
    B: np.ndarray  # (48, C)
    eigenvalues: np.ndarray | None = None  # retained component variances

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    def encode(self, image) -> np.ndarray:
        p = image_to_patches(to_float_image(image))
        return (p - self.mean) @ self.A.T

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape[-1] != self.channels:
            raise CodecError(f"latent has {latent.shape[-1]} channels, codec expects {self.channels}")
        return patches_to_image(latent @ self.B.T + self.mean)

    def save(self, path) -> None:
        meta = {"version": FORMAT_VERSION, "channels": self.channels}
        arrays = {"mean": self.mean, "A": self.A, "B": self.B}
        if self.eigenvalues is not None:
            arrays["eigenvalues"] = self.eigenvalues
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "LinearLatentCodec":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != FORMAT_VERSION:
                raise CodecError(f"unsupported codec file version {meta.get('version')}")
            eig = data["eigenvalues"] if "eigenvalues" in data else None
            return cls(data["mean"], data["A"], data["B"], eig)

    @classmethod
    def mean_preserving(cls, channels: int = 4, offset: float = 0.5) -> "LinearLatentCodec":
        """Fixed codec whose first three channels are the per-colour patch means.

        Channel 3 (if present) is a luminance x-gradient, channel 4 the
        y-gradient; the rest complete an orthonormal basis. Any patch that is
        constant per colour round-trips exactly.
        """
        if not 3 <= channels <= PATCH_DIM:
            raise CodecError(f"mean-preserving codec needs 3..{PATCH_DIM} channels")
        grid = np.arange(PATCH, dtype=np.float64) - (PATCH - 1) / 2
        basis = []
        for c in range(3):
            v = np.zeros((PATCH, PATCH, 3))
            v[..., c] = 1.0
            basis.append(v.ravel())
        basis.append(np.broadcast_to(grid[None, :, None], (PATCH, PATCH, 3)).ravel())
        basis.append(np.broadcast_to(grid[:, None, None], (PATCH, PATCH, 3)).ravel())
        seed = np.stack(basis + list(np.eye(PATCH_DIM)), axis=1)
        q, _ = np.linalg.qr(seed)
        # QR may flip signs; align with the seed directions
        signs = np.sign(np.sum(q[:, :5] * seed[:, :5], axis=0))
        q[:, :5] *= signs
        A = q[:, :channels].T.copy()
        return cls(np.full(PATCH_DIM, float(offset)), A, A.T.copy())


def fit_codec(patches, channels: int = 4, whiten: bool = True, eig_floor: float = 1e-12) -> LinearLatentCodec:
    """PCA fit of a patch sample; keeps the top ``channels`` components.

    With ``whiten`` the latent channels have unit variance on the training
    sample; ``B @ A`` is the same projection either way.
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 2:
        p = p.reshape(-1, PATCH_DIM)
    if p.shape[1] != PATCH_DIM:
        raise CodecError(f"patches must be {PATCH_DIM}-dimensional")
    if not 1 <= channels <= PATCH_DIM:
        raise CodecError(f"channels must be in 1..{PATCH_DIM}")
    if p.shape[0] < channels:
        raise CodecError(f"need at least {channels} patches, got {p.shape[0]}")
    mean = p.mean(axis=0)
    centered = p - mean
    cov = centered.T @ centered / p.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int(np.sum(evals > max(evals[0], 1e-300) * 1e-10))
    if rank < channels:
        raise CodecError(f"patch sample has rank {rank} < {channels} components")
    U = evecs[:, :channels]
    kept = np.clip(evals[:channels], 0.0, None)
    if whiten:
        scale = np.sqrt(np.maximum(kept, eig_floor))
        A = (U / scale).T
        B = U * scale
    else:
        A = U.T.copy()
        B = U.copy()
    return LinearLatentCodec(mean, A, B, kept)


def reconstruction_mse(codec: LinearLatentCodec, patches) -> float:
    """Mean over patches of the squared reconstruction error (summed over 48 dims)."""
    p = np.asarray(patches, dtype=np.float64).reshape(-1, PATCH_DIM)
    rec = (p - codec.mean) @ codec.A.T @ codec.B.T + codec.mean
    return float(np.mean(np.sum((p - rec) ** 2, axis=1)))


@dataclasses.dataclass(frozen=True)
class DecodeTiling:
    """Sliding-window decode parameters in latent pixels.

    ``overlap`` is the total overlap between neighbouring windows as a
    fraction of ``window``.
    """

    window: int = 512
    overlap: float = 0.25

    def __post_init__(self):
        if self.window < 1:
            raise CodecError("window must be positive")
        if not 0.0 < self.overlap < 1.0 or self.window < 2 * self.overlap * self.window:
            raise CodecError(f"overlap must be in (0, 0.5], got {self.overlap}")


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Window origins at multiples of ``stride``, last one clamped to end at ``n``."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window, stride))
    starts.append(n - window)
    return starts


def ramp_weights(start: int, size: int, n: int, band: int) -> np.ndarray:
    """1-D blend weight of a window: linear ramps over ``band`` except at the canvas edges."""
    i = np.arange(size, dtype=np.float64)
    w = np.ones(size)
    if band > 0:
        if start > 0:
            w = np.minimum(w, (i + 0.5) / band)
        if start + size < n:
            w = np.minimum(w, (size - i - 0.5) / band)
    return w


def tiled_decode(codec: LinearLatentCodec, latent: np.ndarray, tiling: DecodeTiling = DecodeTiling()) -> np.ndarray:
    """Decode overlapping latent windows and blend them with linear ramps."""
    latent = np.asarray(latent, dtype=np.float64)
    h, w = latent.shape[-3], latent.shape[-2]
    if h <= tiling.window and w <= tiling.window:
        return codec.decode(latent)
    band = max(1, int(round(tiling.overlap * tiling.window)))
    stride = tiling.window - band
    ys = window_starts(h, tiling.window, stride)
    xs = window_starts(w, tiling.window, stride)
    wy = min(h, tiling.window)
    wx = min(w, tiling.window)
    lead = latent.shape[:-3]
    out = np.zeros(lead + (h * PATCH, w * PATCH, 3))
    norm = np.zeros((h * PATCH, w * PATCH, 1))
    for y0 in ys:
        ry = np.repeat(ramp_weights(y0, wy, h, band), PATCH)
        for x0 in xs:
            rx = np.repeat(ramp_weights(x0, wx, w, band), PATCH)
            weight = (ry[:, None] * rx[None, :])[..., None]
            dec = codec.decode(latent[..., y0 : y0 + wy, x0 : x0 + wx, :])
            sl = (slice(y0 * PATCH, (y0 + wy) * PATCH), slice(x0 * PATCH, (x0 + wx) * PATCH))
            out[(Ellipsis,) + sl + (slice(None),)] += weight * dec
            norm[sl] += weight
    return out / norm


def blend_weight_sum(shape: tuple[int, int], tiling: DecodeTiling) -> np.ndarray:
    """Per-pixel sum of the normalised decode blend weights (1 everywhere)."""
    h, w = shape
    if h <= tiling.window and w <= tiling.window:
        return np.ones((h * PATCH, w * PATCH))
    band = max(1, int(round(tiling.overlap * tiling.window)))
    stride = tiling.window - band
    wy, wx = min(h, tiling.window), min(w, tiling.window)
    raw = []
    norm = np.zeros((h, w))
    for y0 in window_starts(h, tiling.window, stride):
        for x0 in window_starts(w, tiling.window, stride):
            wt = np.outer(ramp_weights(y0, wy, h, band), ramp_weights(x0, wx, w, band))
            raw.append((y0, x0, wt))
            norm[y0 : y0 + wy, x0 : x0 + wx] += wt
    total = np.zeros((h, w))
    for y0, x0, wt in raw:
        total[y0 : y0 + wy, x0 : x0 + wx] += wt / norm[y0 : y0 + wy, x0 : x0 + wx]
    return np.kron(total, np.ones((PATCH, PATCH)))
