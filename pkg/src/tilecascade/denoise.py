"""Noise predictors ``eps_hat = predict(z_t, t, cond)``.

Every denoiser here is deterministic and shape-preserving. Latents are
``(..., H, W, C)`` arrays; leading batch dimensions are carried through.

The analytic denoisers are exact posterior-mean predictors for Gaussian (or
Gaussian-mixture) data and serve as oracles; :class:`LinearDenoiser` is the
closed-form trainable stand-in for a learned network.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Hashable, Sequence
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from .codec import LinearLatentCodec, to_float_image
from .schedule import NoiseSchedule, forward_diffuse

MODEL_VERSION = 1


class DenoiserError(ValueError):
    pass


class DegenerateTimestepError(DenoiserError):
    """Prediction requested where ``alpha_bar == 1`` (no noise to predict)."""


class IllConditionedError(DenoiserError):
    pass


@dataclasses.dataclass(frozen=True)
class ConditioningBundle:
    """What a denoiser may condition on besides ``(z_t, t)``.

    ``low_res`` is the previous-scale RGB crop, spatially aligned with the
    latent (same H, W). ``label`` is an opaque embedding token; the negative
    prompt and positive labels are routed through it.
    """

    low_res: np.ndarray | None = None
    label: Hashable | None = None

    def with_label(self, label) -> "ConditioningBundle":
        return dataclasses.replace(self, label=label)


class Denoiser(Protocol):
    def predict(self, z_t: np.ndarray, t: int, cond: ConditioningBundle | None = None) -> np.ndarray: ...


def _alpha_bar(sched: NoiseSchedule, t: int) -> float:
    a = float(sched.alpha_bar[sched.check_t(t)])
    if a >= 1.0:
        raise DegenerateTimestepError(f"alpha_bar[{t}] == 1; noise is undefined")
    return a


def _eps_from_x0(z_t, x0, a):
    return (z_t - math.sqrt(a) * x0) / math.sqrt(1.0 - a)


def gaussian_posterior_mean(z_t, a: float, mu, var) -> np.ndarray:
    """E[x0 | z_t] for x0 ~ N(mu, diag var), z_t = sqrt(a) x0 + sqrt(1-a) eps."""
    gain = math.sqrt(a) * var / (a * var + (1.0 - a))
    return mu + gain * (z_t - math.sqrt(a) * mu)


@dataclasses.dataclass(frozen=True)
class AnalyticGaussianDenoiser:
    """Exact predictor for data ``x0 ~ N(mu, diag(var))``.

    ``mu`` and ``var`` broadcast against the latent (scalars, per-channel
    vectors or full images).
    """

    mu: np.ndarray | float
    var: np.ndarray | float
    sched: NoiseSchedule

    def __post_init__(self):
        if np.any(np.asarray(self.var) < 0):
            raise DenoiserError("variance must be non-negative")

    def predict_x0(self, z_t, t):
        a = _alpha_bar(self.sched, t)
        return gaussian_posterior_mean(np.asarray(z_t, dtype=np.float64), a, np.asarray(self.mu), np.asarray(self.var))

    def predict(self, z_t, t, cond=None):
        a = _alpha_bar(self.sched, t)
        z_t = np.asarray(z_t, dtype=np.float64)
        return _eps_from_x0(z_t, gaussian_posterior_mean(z_t, a, np.asarray(self.mu), np.asarray(self.var)), a)


def analytic_predict(d: AnalyticGaussianDenoiser, z_t, t, sched: NoiseSchedule | None = None):
    if sched is not None and sched is not d.sched:
        d = dataclasses.replace(d, sched=sched)
    return d.predict(z_t, t)


@dataclasses.dataclass(frozen=True)
class GaussianMixtureDenoiser:
    """Exact predictor for a mixture of diagonal Gaussians over whole latents.

    Responsibilities come from the marginal likelihood of ``z_t`` under each
    noised component, computed over all non-batch elements.
    """

    weights: Sequence[float]
    mus: Sequence[np.ndarray]
    vars: Sequence[np.ndarray]
    sched: NoiseSchedule

    def responsibilities(self, z_t, t) -> np.ndarray:
        a = _alpha_bar(self.sched, t)
        z_t = np.asarray(z_t, dtype=np.float64)
        logs = []
        for w, mu, var in zip(self.weights, self.mus, self.vars):
            m = math.sqrt(a) * np.asarray(mu)
            v = a * np.asarray(var) + (1.0 - a)
            ll = -0.5 * (np.log(2 * math.pi * v) + (z_t - m) ** 2 / v)
            ll = np.broadcast_to(ll, z_t.shape)
            logs.append(math.log(w) + ll.reshape(*z_t.shape[:-3], -1).sum(axis=-1))
        logs = np.stack(logs, axis=0)
        return np.exp(logs - logsumexp(logs, axis=0, keepdims=True))

    def predict(self, z_t, t, cond=None):
        z_t = np.asarray(z_t, dtype=np.float64)
        resp = self.responsibilities(z_t, t)
        out = np.zeros_like(z_t)
        for k, (mu, var) in enumerate(zip(self.mus, self.vars)):
            eps_k = AnalyticGaussianDenoiser(mu, var, self.sched).predict(z_t, t)
            out += resp[k][(...,) + (None,) * 3] * eps_k
        return out


def se_eigh(n: int, length_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of the n x n squared-exponential correlation matrix.

    Cached per ``(n, length_scale)``; the arrays are read-only.
    """
    key = (int(n), float(length_scale))
    hit = _EIGH.get(key)
    if hit is None:
        i = np.arange(n, dtype=np.float64)
        K = np.exp(-((i[:, None] - i[None, :]) ** 2) / (2.0 * length_scale**2))
        w, U = np.linalg.eigh(K)
        w = np.clip(w, 0.0, None)
        w.setflags(write=False)
        U.setflags(write=False)
        hit = _EIGH[key] = (w, U)
    return hit


_EIGH: dict = {}


def _to_basis(x: np.ndarray, uy: np.ndarray, ux: np.ndarray) -> np.ndarray:
    # (..., H, W, C) -> (..., C, H, W) -> uy^T X ux
    return uy.T @ np.moveaxis(x, -1, -3) @ ux


def _from_basis(c: np.ndarray, uy: np.ndarray, ux: np.ndarray) -> np.ndarray:
    return np.moveaxis(uy @ c @ ux.T, -3, -1)


@dataclasses.dataclass(frozen=True)
class StationaryGaussianDenoiser:
    """Exact predictor for a stationary Gaussian field seen through a finite crop.

    Each channel is a field with squared-exponential correlation of length
    ``length_scale`` pixels, a white ``nugget`` fraction, marginal variance
    ``var`` and mean ``mean``. The covariance of the crop is a Kronecker
    product of two 1-D correlation matrices, so in their joint eigenbasis it
    is diagonal and the posterior mean is a per-coefficient gain. The crop
    is modelled as exactly what it is, a window onto a larger field: pixels
    near its border are simply less constrained.

    ``mean`` broadcasts against the latent; ``var`` is scalar or per channel.
    """

    mean: np.ndarray | float
    var: np.ndarray | float
    sched: NoiseSchedule
    length_scale: float = 3.0
    nugget: float = 0.0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise DenoiserError("length_scale must be positive")
        if not 0.0 <= self.nugget <= 1.0:
            raise DenoiserError("nugget must be in [0, 1]")
        if np.any(np.asarray(self.var) < 0):
            raise DenoiserError("variance must be non-negative")

    def coefficient_variance(self, shape: tuple[int, int]) -> np.ndarray:
        """Prior variance of each basis coefficient, shape ``(C or 1, H, W)``."""
        wy, _ = se_eigh(shape[0], self.length_scale)
        wx, _ = se_eigh(shape[1], self.length_scale)
        spec = (1.0 - self.nugget) * np.outer(wy, wx) + self.nugget
        var = np.asarray(self.var, dtype=np.float64).reshape(-1, 1, 1)
        return spec[None] * var

    def predict_x0(self, z_t, t, mean=None):
        a = _alpha_bar(self.sched, t)
        z_t = np.asarray(z_t, dtype=np.float64)
        mu = np.asarray(self.mean if mean is None else mean, dtype=np.float64)
        h, w = z_t.shape[-3:-1]
        _, uy = se_eigh(h, self.length_scale)
        _, ux = se_eigh(w, self.length_scale)
        spec = self.coefficient_variance((h, w))
        gain = math.sqrt(a) * spec / (a * spec + (1.0 - a))
        resid = z_t - math.sqrt(a) * mu
        return mu + _from_basis(gain * _to_basis(resid, uy, ux), uy, ux)

    def predict(self, z_t, t, cond=None):
        a = _alpha_bar(self.sched, t)
        z_t = np.asarray(z_t, dtype=np.float64)
        return _eps_from_x0(z_t, self.predict_x0(z_t, t), a)

    def sample_prior(self, shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
        """Exact draw of a ``shape`` crop of the field."""
        h, w, c = shape
        _, uy = se_eigh(h, self.length_scale)
        _, ux = se_eigh(w, self.length_scale)
        spec = np.broadcast_to(self.coefficient_variance((h, w)), (c, h, w))
        coef = rng.standard_normal((c, h, w)) * np.sqrt(spec)
        return np.asarray(self.mean, dtype=np.float64) + _from_basis(coef, uy, ux)


def upsampled_target(codec: LinearLatentCodec, low_res) -> np.ndarray:
    """Latent of the x4 nearest-neighbour upsample of ``low_res``.

    Spatial dims equal those of ``low_res``.
    """
    img = to_float_image(low_res)
    up = np.repeat(np.repeat(img, 4, axis=-3), 4, axis=-2)
    return codec.encode(up)


@dataclasses.dataclass(frozen=True)
class ConsistencyDenoiser:
    """Super-resolution predictor centred on the upsampled conditioning.

    Clean data is modelled as ``N(encode(upsample(low_res)), detail_var)``
    per channel, optionally with stationary spatial correlation. With zero
    detail variance (or variance only on channels orthogonal to the patch
    means) the output box-downsamples exactly to its conditioning.
    """

    codec: LinearLatentCodec
    sched: NoiseSchedule
    detail_var: np.ndarray | float = 0.0
    length_scale: float = 0.0
    nugget: float = 0.0

    def predict(self, z_t, t, cond=None):
        if cond is None or cond.low_res is None:
            raise DenoiserError("super-resolution denoiser needs low_res conditioning")
        z_t = np.asarray(z_t, dtype=np.float64)
        target = upsampled_target(self.codec, cond.low_res)
        if target.shape[-3:] != z_t.shape[-3:]:
            raise DenoiserError(f"conditioning latent {target.shape} does not match {z_t.shape}")
        if self.length_scale > 0:
            d = StationaryGaussianDenoiser(target, self.detail_var, self.sched, self.length_scale, self.nugget)
            return d.predict(z_t, t)
        return AnalyticGaussianDenoiser(target, self.detail_var, self.sched).predict(z_t, t)


@dataclasses.dataclass(frozen=True)
class LabelRouter:
    """Dispatch on ``cond.label``; unknown or missing labels use ``default``."""

    default: Denoiser
    by_label: dict = dataclasses.field(default_factory=dict)

    def predict(self, z_t, t, cond=None):
        label = None if cond is None else cond.label
        target = self.by_label.get(label, self.default) if label is not None else self.default
        return target.predict(z_t, t, cond)


# --------------------------------------------------------------------------
# closed-form trainable denoiser


def _window_features(x: np.ndarray, window: int) -> np.ndarray:
    """(..., H, W, K) -> (..., H, W, K * window**2) with edge padding."""
    if window == 1:
        return x
    r = window // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x, pad, mode="edge")
    v = sliding_window_view(xp, (window, window), axis=(-3, -2))
    return v.reshape(*x.shape[:-1], -1)


def bucket_edges(T: int, n_buckets: int) -> np.ndarray:
    """Bucket ``k`` holds timesteps in ``(edges[k], edges[k+1]]``."""
    if not 1 <= n_buckets <= T:
        raise DenoiserError(f"need 1 <= buckets <= T, got {n_buckets}")
    return np.round(np.linspace(0, T, n_buckets + 1)).astype(int)


@dataclasses.dataclass(frozen=True)
class LinearDenoiser:
    """Per-timestep-bucket affine map from a local window of features to noise.

    Features at each pixel are the ``window x window`` neighbourhood of the
    noisy latent, plus (for super-resolution models) the same neighbourhood
    of the aligned low-res RGB image.
    """

    weights: np.ndarray  # (n_buckets, F, C)
    bias: np.ndarray  # (n_buckets, C)
    edges: np.ndarray  # (n_buckets + 1,)
    window: int
    latent_channels: int
    conditional: bool = False

    def bucket(self, t: int) -> int:
        t = int(t)
        if not self.edges[0] < t <= self.edges[-1]:
            raise DenoiserError(f"timestep {t} outside (0, {self.edges[-1]}]")
        return int(np.searchsorted(self.edges, t, side="left") - 1)

    def features(self, z_t, cond=None) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape[-1] != self.latent_channels:
            raise DenoiserError(f"expected {self.latent_channels} latent channels, got {z_t.shape[-1]}")
        parts = [_window_features(z_t, self.window)]
        if self.conditional:
            if cond is None or cond.low_res is None:
                raise DenoiserError("conditional model needs low_res")
            low = to_float_image(cond.low_res)
            if low.shape[-3:-1] != z_t.shape[-3:-1]:
                raise DenoiserError(f"low_res dims {low.shape[-3:-1]} != latent dims {z_t.shape[-3:-1]}")
            low = np.broadcast_to(low, z_t.shape[:-1] + (low.shape[-1],))
            parts.append(_window_features(low, self.window))
        return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]

    def predict(self, z_t, t, cond=None):
        b = self.bucket(t)
        return self.features(z_t, cond) @ self.weights[b] + self.bias[b]

    @property
    def self_feature_count(self) -> int:
        return self.latent_channels * self.window**2

    def save(self, path) -> None:
        meta = {
            "version": MODEL_VERSION,
            "window": self.window,
            "latent_channels": self.latent_channels,
            "conditional": self.conditional,
        }
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), weights=self.weights, bias=self.bias, edges=self.edges)

    @classmethod
    def load(cls, path) -> "LinearDenoiser":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != MODEL_VERSION:
                raise DenoiserError(f"unsupported model version {meta.get('version')}")
            return cls(
                data["weights"], data["bias"], data["edges"], int(meta["window"]),
                int(meta["latent_channels"]), bool(meta["conditional"]),
            )


@dataclasses.dataclass
class _NormalEquations:
    xtx: np.ndarray
    xty: np.ndarray

    @classmethod
    def empty(cls, f, c):
        return cls(np.zeros((f + 1, f + 1)), np.zeros((f + 1, c)))

    def add(self, x, y):
        x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        self.xtx += x.T @ x
        self.xty += x.T @ y

    def solve(self, ridge):
        f = self.xtx.shape[0] - 1
        penalty = np.full(f + 1, float(ridge))
        penalty[-1] = 0.0
        lhs = self.xtx + np.diag(penalty)
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond > 1e13:
            raise IllConditionedError(f"normal equations ill-conditioned (cond={cond:.3g}); increase ridge")
        theta = np.linalg.solve(lhs, self.xty)
        return theta[:-1], theta[-1]


def _draw_timesteps(rng, lo, hi, n):
    return rng.integers(lo + 1, hi + 1, size=n)


def _fit(
    latents: np.ndarray,
    lows: np.ndarray | None,
    sched: NoiseSchedule,
    buckets: int,
    window: int,
    ridge: float,
    draws_per_bucket: int,
    seed: int,
) -> LinearDenoiser:
    if latents.shape[0] == 0:
        raise DenoiserError("empty training set")
    if window < 1 or window % 2 == 0:
        raise DenoiserError("window must be a positive odd integer")
    C = latents.shape[-1]
    edges = bucket_edges(sched.T, buckets)
    proto = LinearDenoiser(
        np.zeros((buckets, 1, C)), np.zeros((buckets, C)), edges, window, C, lows is not None
    )
    rng = np.random.default_rng(seed)
    n = latents.shape[0]
    weights, biases = [], []
    for b in range(buckets):
        ne = None
        # fixed summation order: image draws in sequence
        ts = _draw_timesteps(rng, edges[b], edges[b + 1], draws_per_bucket)
        idx = rng.integers(0, n, size=draws_per_bucket)
        for i, t in zip(idx, ts):
            z0 = latents[i]
            eps = rng.standard_normal(z0.shape)
            z_t = forward_diffuse(z0, int(t), eps, sched)
            cond = ConditioningBundle(low_res=lows[i]) if lows is not None else None
            x = proto.features(z_t, cond).reshape(-1, proto.self_feature_count + (window**2 * 3 if lows is not None else 0))
            if ne is None:
                ne = _NormalEquations.empty(x.shape[1], C)
            ne.add(x, eps.reshape(-1, C))
        W, bias = ne.solve(ridge)
        weights.append(W)
        biases.append(bias)
    return LinearDenoiser(np.stack(weights), np.stack(biases), edges, window, C, lows is not None)


def train_linear_denoiser(
    latents,
    sched: NoiseSchedule,
    buckets: int = 10,
    window: int = 3,
    ridge: float = 1e-3,
    draws_per_bucket: int = 256,
    seed: int = 0,
) -> LinearDenoiser:
    """Ridge least-squares fit of the noise-prediction MSE objective.

    ``latents`` is a stack ``(N, H, W, C)`` of clean latents.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 3:
        latents = latents[None]
    return _fit(latents, None, sched, buckets, window, ridge, draws_per_bucket, seed)


def train_sr_linear_denoiser(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    codec: LinearLatentCodec,
    sched: NoiseSchedule,
    buckets: int = 10,
    window: int = 3,
    ridge: float = 1e-3,
    draws_per_bucket: int = 256,
    seed: int = 0,
) -> LinearDenoiser:
    """Same objective, conditioned on the aligned low-res tile of each pair.

    Each pair is ``(low_res, high_res)`` with ``high_res`` exactly 4x the
    side of ``low_res``; the high-res image is encoded so latent dims equal
    low-res dims.
    """
    lows, latents = _encode_pairs(pairs, codec)
    return _fit(latents, lows, sched, buckets, window, ridge, draws_per_bucket, seed)


def _encode_pairs(pairs, codec):
    if len(pairs) == 0:
        raise DenoiserError("empty training set")
    lows, latents = [], []
    for low, high in pairs:
        low = to_float_image(low)
        high = np.asarray(high)
        if high.shape[0] != 4 * low.shape[0] or high.shape[1] != 4 * low.shape[1]:
            raise DenoiserError(f"misaligned pair: low {low.shape[:2]}, high {high.shape[:2]}")
        lows.append(low)
        latents.append(codec.encode(high))
    return np.stack(lows), np.stack(latents)


def noise_prediction_loss(
    denoiser: Denoiser,
    latents,
    sched: NoiseSchedule,
    n_samples: int,
    seed: int = 1,
    lows=None,
    t_range: tuple[int, int] | None = None,
) -> float:
    """Monte-Carlo estimate of E ||eps - eps_hat||^2 per element.

    Draws ``n_samples`` (image, t, eps) triples with ``t`` uniform on
    ``t_range`` (default ``[1, T]``).
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 3:
        latents = latents[None]
    lo, hi = t_range or (1, sched.T)
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for _ in range(n_samples):
        i = int(rng.integers(0, latents.shape[0]))
        t = int(rng.integers(lo, hi + 1))
        eps = rng.standard_normal(latents[i].shape)
        z_t = forward_diffuse(latents[i], t, eps, sched)
        cond = ConditioningBundle(low_res=lows[i]) if lows is not None else None
        pred = denoiser.predict(z_t, t, cond)
        total += float(np.sum((eps - pred) ** 2))
        count += eps.size
    return total / count


def sr_loss(denoiser, pairs, codec, sched, n_samples, seed=1) -> float:
    lows, latents = _encode_pairs(pairs, codec)
    return noise_prediction_loss(denoiser, latents, sched, n_samples, seed, lows=lows)


def unconditional_on_pairs(pairs, codec, sched, **kw) -> LinearDenoiser:
    """Unconditional model trained on the high-res side of ``pairs``."""
    _, latents = _encode_pairs(pairs, codec)
    return train_linear_denoiser(latents, sched, **kw)
