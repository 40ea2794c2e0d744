"""Noise schedules and reverse-process integrators.

Timesteps are 1-based: index 0 of every table describes clean data
(``alpha = alpha_bar = 1``) and ``T`` is the noisiest step. All tables are
precomputed numpy arrays of length ``T + 1``.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep arguments."""


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention ``alpha``, its cumulative product and reverse noise scale.

    Attributes:
      kind: Name of the generating rule (``linear`` or ``cosine``).
      T: Number of diffusion steps.
      alpha: ``alpha[t]`` for ``t`` in ``0..T`` with ``alpha[0] == 1``.
      alpha_bar: Cumulative product of ``alpha[1..t]``.
      sigma: Reverse-step noise scale used by :func:`ddpm_step`.
      params: Parameters needed to rebuild the schedule.
    """

    kind: str
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    params: dict = dataclasses.field(default_factory=dict)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_t(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "T": self.T, "params": self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "NoiseSchedule":
        data = json.loads(blob)
        return make_schedule(data["kind"], data["T"], **data.get("params", {}))


def make_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
    cosine_s: float = 0.008,
    max_beta: float = 0.999,
    sigma: str = "zero",
) -> NoiseSchedule:
    """Build a schedule table.

    ``linear`` spaces ``beta`` evenly in ``[beta_min, beta_max]``; ``cosine``
    uses the squared-cosine ``alpha_bar`` curve with offset ``cosine_s``.
    ``sigma`` selects the reverse noise: ``zero`` (deterministic) or ``beta``
    (ancestral, ``sigma_t = sqrt(beta_t)``).
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "linear":
        if not (0.0 <= beta_min <= beta_max < 1.0):
            raise ScheduleError(f"need 0 <= beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        params = {"beta_min": beta_min, "beta_max": beta_max}
    elif kind == "cosine":
        if cosine_s <= 0 or not 0 < max_beta < 1:
            raise ScheduleError("cosine schedule needs cosine_s > 0 and 0 < max_beta < 1")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_s) / (1 + cosine_s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, max_beta)
        params = {"cosine_s": cosine_s, "max_beta": max_beta}
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if sigma not in ("zero", "beta"):
        raise ScheduleError(f"unknown sigma mode {sigma!r}")
    params["sigma"] = sigma

    alpha = np.concatenate([[1.0], 1.0 - betas])
    alpha_bar = np.cumprod(alpha)
    if sigma == "beta":
        sig = np.sqrt(1.0 - alpha)
    else:
        sig = np.zeros_like(alpha)
    for arr in (alpha, alpha_bar, sig):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, alpha, alpha_bar, sig, params)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption ``sqrt(ab) z0 + sqrt(1 - ab) eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar[sched.check_t(t)]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddpm_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
    sigma: float | None = None,
) -> np.ndarray:
    """One ancestral reverse step from ``t`` to ``t - 1``."""
    t = sched.check_t(t, allow_zero=False)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ScheduleError(f"shape mismatch {z_t.shape} vs {eps_hat.shape}")
    if np.isnan(z_t).any() or np.isnan(eps_hat).any():
        raise ScheduleError("NaN in reverse-step inputs")
    a = sched.alpha[t]
    ab = sched.alpha_bar[t]
    sig = sched.sigma[t] if sigma is None else sigma
    out = (z_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if sig != 0.0:
        if noise is None:
            raise ScheduleError("stochastic step requires a noise draw")
        out = out + sig * np.asarray(noise, dtype=np.float64)
    return out


def _lambda(ab: float) -> float:
    return 0.5 * math.log(ab) - 0.5 * math.log1p(-ab)


def dpm_single_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t_from: int,
    t_to: int,
    sched: NoiseSchedule,
) -> np.ndarray:
    """First-order DPM-Solver step (exponential integrator in log-SNR)."""
    t_from = sched.check_t(t_from, allow_zero=False)
    t_to = sched.check_t(t_to)
    if t_to > t_from:
        raise ScheduleError(f"non-monotone step {t_from} -> {t_to}")
    z_t = np.asarray(z_t, dtype=np.float64)
    if t_to == t_from:
        return z_t.copy()
    ab_from = sched.alpha_bar[t_from]
    ab_to = sched.alpha_bar[t_to]
    a_from, s_from = math.sqrt(ab_from), math.sqrt(1.0 - ab_from)
    a_to, s_to = math.sqrt(ab_to), math.sqrt(1.0 - ab_to)
    if s_to == 0.0:
        # infinite log-SNR target: s_to * expm1(h) -> a_to * s_from / a_from
        noise_coef = a_to * s_from / a_from
    else:
        h = _lambda(ab_to) - _lambda(ab_from)
        noise_coef = s_to * math.expm1(h)
    return (a_to / a_from) * z_t - noise_coef * np.asarray(eps_hat, dtype=np.float64)


def ddim_step(z_t, eps_hat, t_from: int, t_to: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update written in terms of the predicted clean latent."""
    ab_from = sched.alpha_bar[t_from]
    ab_to = sched.alpha_bar[t_to]
    x0 = (z_t - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * eps_hat


def respace(sched: NoiseSchedule, timesteps) -> NoiseSchedule:
    """Schedule whose step ``k`` spans ``timesteps[k-1] -> timesteps[k]`` of ``sched``.

    ``timesteps`` is ascending and starts with 0.
    """
    ts = np.asarray(timesteps, dtype=np.int64)
    if ts[0] != 0 or np.any(np.diff(ts) <= 0):
        raise ScheduleError("respaced timesteps must start at 0 and strictly increase")
    ab = sched.alpha_bar[ts]
    alpha = np.concatenate([[1.0], ab[1:] / ab[:-1]])
    if sched.params.get("sigma") == "beta":
        sig = np.sqrt(1.0 - alpha)
    else:
        sig = np.zeros_like(alpha)
    params = dict(sched.params, respaced=[int(t) for t in ts])
    return NoiseSchedule(sched.kind, len(ts) - 1, alpha, ab.copy(), sig, params)


def inference_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    """Descending integer timesteps ``[T, ..., 0]`` with ``steps`` intervals."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    steps = min(steps, sched.T)
    ts = np.round(np.linspace(sched.T, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]


@dataclasses.dataclass(frozen=True)
class Sampler:
    """A reverse integrator bound to a schedule and an inference timestep grid.

    ``kind`` is ``dpm`` (first-order DPM-Solver, deterministic) or ``ddpm``
    (ancestral reverse step on the respaced schedule).
    """

    sched: NoiseSchedule
    steps: int = 50
    kind: str = "dpm"

    def __post_init__(self):
        if self.kind not in ("dpm", "ddpm"):
            raise ScheduleError(f"unknown sampler {self.kind!r}")

    @property
    def timesteps(self) -> list[int]:
        return inference_timesteps(self.sched, self.steps)

    @property
    def stochastic(self) -> bool:
        return self.kind == "ddpm" and self.sched.params.get("sigma") == "beta"

    def step(self, z: np.ndarray, eps_hat: np.ndarray, t_from: int, t_to: int, noise=None) -> np.ndarray:
        if self.kind == "dpm":
            return dpm_single_step(z, eps_hat, t_from, t_to, self.sched)
        ab_from = self.sched.alpha_bar[t_from]
        ab_to = self.sched.alpha_bar[t_to]
        a = ab_from / ab_to
        out = (z - ((1.0 - a) / math.sqrt(1.0 - ab_from)) * eps_hat) / math.sqrt(a)
        if self.stochastic and t_to > 0:
            if noise is None:
                raise ScheduleError("stochastic step requires a noise draw")
            out = out + math.sqrt(1.0 - a) * noise
        return out


def sample(predict, z_T: np.ndarray, sampler: Sampler, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the full reverse trajectory with ``predict(z, t) -> eps_hat``."""
    z = np.asarray(z_T, dtype=np.float64)
    ts = sampler.timesteps
    for t_from, t_to in zip(ts[:-1], ts[1:]):
        eps = predict(z, t_from)
        noise = None
        if sampler.stochastic and t_to > 0:
            noise = rng.standard_normal(z.shape)
        z = sampler.step(z, eps, t_from, t_to, noise)
    return z
