"""Evaluation statistics: Frechet distance, kernel MMD, evaluation split, seam energy.

Feature extractors are pluggable. The default one is a seeded random
projection of downsampled pixels, so absolute FID/KID values are only
comparable between runs that use the same extractor seed and dimension; they
are never comparable to Inception-based numbers.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable

import numpy as np
from PIL import Image


class MetricsError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class FeatureStats:
    n: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.n < 2:
            raise MetricsError("feature statistics need n >= 2")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricsError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9, rtol=0):
            raise MetricsError("covariance is not symmetric")

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise MetricsError("need a (n >= 2, d) feature matrix")
        cov = np.cov(x, rowvar=False)
        cov = np.atleast_2d(0.5 * (cov + cov.T))
        return cls(x.shape[0], x.mean(axis=0), cov)


def _psd_sqrt(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -tol:
        raise MetricsError(f"matrix not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the symmetric form sqrt(S_a)^(1/2) S_b sqrt(S_a),
    which has the same trace of square root as S_a S_b.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricsError(f"dimension mismatch {a.mean.size} vs {b.mean.size}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov, tol)
    mid = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if w.min() < -tol:
        raise MetricsError(f"covariance product not PSD (min eigenvalue {w.min():.3g})")
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, kernel=polynomial_kernel) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = kernel(x, x)
    kyy = kernel(y, y)
    kxy = kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclasses.dataclass(frozen=True)
class KidResult:
    mean: float
    stderr: float
    values: np.ndarray


def kid(features_a, features_b, subset_size: int = 1000, n_subsets: int = 100, seed: int = 0) -> KidResult:
    """Mean and standard error of the unbiased polynomial-kernel MMD^2 over random subsets.

    Subset ``i`` is drawn without replacement from each set with its own
    generator seeded by ``(seed, i)``. When both arguments hold the same
    sample, the two subsets of a pair are drawn disjoint: points shared by
    both sides would enter only the cross term and bias the estimate low.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise MetricsError("feature dimension mismatch")
    same = a.shape == b.shape and np.array_equal(a, b)
    need = 2 * subset_size if same else subset_size
    if subset_size < 2 or min(a.shape[0], b.shape[0]) < need:
        what = "when comparing a set with itself" if same else "per set"
        raise MetricsError(f"KID needs >= {need} samples {what}, got {a.shape[0]} and {b.shape[0]}")
    vals = np.empty(n_subsets)
    for i in range(n_subsets):
        rng = np.random.default_rng([seed, i])
        if same:
            idx = rng.choice(a.shape[0], 2 * subset_size, replace=False)
            ia, ib = idx[:subset_size], idx[subset_size:]
        else:
            ia = rng.choice(a.shape[0], subset_size, replace=False)
            ib = rng.choice(b.shape[0], subset_size, replace=False)
        vals[i] = mmd2_unbiased(a[ia], b[ib])
    stderr = float(vals.std(ddof=1) / np.sqrt(n_subsets)) if n_subsets > 1 else 0.0
    return KidResult(float(vals.mean()), stderr, vals)


# ---------------------------------------------------------------------------
# evaluation split


def split_tiles(image: np.ndarray, tile: int, stride: int) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    H, W = image.shape[:2]
    if H < tile or W < tile or (H - tile) % stride or (W - tile) % stride:
        raise MetricsError(f"{H}x{W} image does not split evenly into {tile}px tiles at stride {stride}")
    origins = [(y, x) for y in range(0, H - tile + 1, stride) for x in range(0, W - tile + 1, stride)]
    return [image[y : y + tile, x : x + tile] for y, x in origins], origins


def eval_split(image: np.ndarray, tile: int = 512, stride: int = 256, side: int = 2048) -> list[np.ndarray]:
    """7x7 grid of overlapping 512px tiles over a 2048px image."""
    image = np.asarray(image)
    if image.shape[:2] != (side, side):
        raise MetricsError(f"eval split expects a {side}x{side} image, got {image.shape[:2]}")
    return split_tiles(image, tile, stride)[0]


# ---------------------------------------------------------------------------
# seam diagnostic


@dataclasses.dataclass(frozen=True)
class SeamReport:
    boundary: float
    interior: float
    ratio: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def seam_energy(image: np.ndarray, layout=None, rows=None, cols=None, scale: int = 1) -> SeamReport:
    """Mean |second difference| across tile boundaries versus elsewhere.

    Boundary lines come from ``layout.boundaries()`` (times ``scale`` when the
    image is at a finer resolution than the layout) or explicit ``rows`` and
    ``cols``. A boundary at column ``c`` separates pixels ``c-1`` and ``c``;
    the horizontal second differences centred on both count as boundary.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    H, W = img.shape[:2]
    if layout is not None:
        rows, cols = layout.boundaries()
    rows = [r * scale for r in (rows or [])]
    cols = [c * scale for c in (cols or [])]
    if H < 3 or W < 3:
        raise MetricsError("image too small for second differences")
    if any(not 0 < r < H for r in rows) or any(not 0 < c < W for c in cols):
        raise MetricsError("boundary outside image")
    if not rows and not cols:
        raise MetricsError("degenerate layout: no interior boundaries")

    dx = np.abs(img[:, 2:] - 2 * img[:, 1:-1] + img[:, :-2])  # centred on columns 1..W-2
    dy = np.abs(img[2:] - 2 * img[1:-1] + img[:-2])
    colmask = np.zeros(W - 2, dtype=bool)
    for c in cols:
        for j in (c - 1, c):
            if 1 <= j <= W - 2:
                colmask[j - 1] = True
    rowmask = np.zeros(H - 2, dtype=bool)
    for r in rows:
        for i in (r - 1, r):
            if 1 <= i <= H - 2:
                rowmask[i - 1] = True

    b_sum = dx[:, colmask].sum() + dy[rowmask].sum()
    b_cnt = dx[:, colmask].size + dy[rowmask].size
    i_sum = dx[:, ~colmask].sum() + dy[~rowmask].sum()
    i_cnt = dx[:, ~colmask].size + dy[~rowmask].size
    boundary = b_sum / b_cnt if b_cnt else 0.0
    interior = i_sum / i_cnt if i_cnt else 0.0
    if interior == 0.0:
        ratio = 1.0 if boundary == 0.0 else float("inf")
    else:
        ratio = boundary / interior
    return SeamReport(float(boundary), float(interior), float(ratio))


# ---------------------------------------------------------------------------
# feature extraction

FeatureExtractor = Callable[[np.ndarray], np.ndarray]


class RandomProjectionExtractor:
    """Bilinear downsample to ``size``x``size``, flatten, project to ``dim`` features."""

    def __init__(self, seed: int = 0, dim: int = 2048, size: int = 64):
        self.seed = seed
        self.dim = dim
        self.size = size
        n_in = size * size * 3
        rng = np.random.default_rng(seed)
        self._proj = (rng.standard_normal((n_in, dim), dtype=np.float32) / np.float32(np.sqrt(n_in)))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.dtype != np.uint8:
            img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        small = Image.fromarray(img[..., :3]).resize((self.size, self.size), Image.BILINEAR)
        x = np.asarray(small, dtype=np.float32).reshape(-1) / np.float32(255.0)
        return (x @ self._proj).astype(np.float64)

    def describe(self) -> dict:
        return {"kind": "random_projection", "seed": self.seed, "dim": self.dim, "size": self.size}


def extract(images, extractor: FeatureExtractor) -> np.ndarray:
    return np.stack([extractor(im) for im in images])
