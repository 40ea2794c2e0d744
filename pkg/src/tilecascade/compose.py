"""Score composition: negative conditioning and classifier-free guidance."""

from __future__ import annotations

import dataclasses
from collections.abc import Hashable

import numpy as np

from .denoise import ConditioningBundle, Denoiser

DEFAULT_NEGATIVE_PROMPT = "blurry, low res, low quality"

# per-stage negative-guidance strength of the five x4 models
DEFAULT_LAMBDA_NEG = {
    "10to12": 5.0,
    "12to14": 2.0,
    "14to16": 3.0,
    "16to18": 3.0,
    "18to20": 4.0,
}

# label-conditioned base generation: positive label weight, negative weight
LABEL_GUIDANCE_WEIGHTS = (10.0, 3.0)


class ComposeError(ValueError):
    pass


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ComposeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def negative_compose(eps: np.ndarray, eps_neg: np.ndarray, lambda_neg: float) -> np.ndarray:
    """``eps + lambda_neg * (eps - eps_neg)``: push away from the negative prediction."""
    _check(eps, eps_neg)
    if lambda_neg < 0:
        raise ComposeError("lambda_neg must be non-negative")
    return eps + lambda_neg * (eps - eps_neg)


def cfg_compose(eps_uncond: np.ndarray, eps_cond: np.ndarray, w_pos: float) -> np.ndarray:
    """``eps_uncond + w_pos * (eps_cond - eps_uncond)``, written so both endpoints are exact."""
    _check(eps_uncond, eps_cond)
    return (1.0 - w_pos) * eps_uncond + w_pos * eps_cond


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    """Guidance applied around a denoiser call.

    Positive guidance (if ``pos_label`` is set) is applied first, then
    negative conditioning against ``neg_embedding``.
    """

    lambda_neg: float = 0.0
    neg_embedding: Hashable = DEFAULT_NEGATIVE_PROMPT
    pos_label: Hashable | None = None
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_neg < 0:
            raise ComposeError("lambda_neg must be non-negative")


def guided_predict(
    denoiser: Denoiser,
    z_t: np.ndarray,
    t: int,
    cond: ConditioningBundle | None,
    guidance: GuidanceConfig | None,
) -> np.ndarray:
    """Evaluate ``denoiser`` and compose its predictions per ``guidance``.

    With no positive label and ``lambda_neg == 0`` this is exactly one plain
    ``predict`` call.
    """
    base = cond if cond is not None else ConditioningBundle()
    eps = denoiser.predict(z_t, t, base)
    if guidance is None:
        return eps
    if guidance.pos_label is not None:
        eps_c = denoiser.predict(z_t, t, base.with_label(guidance.pos_label))
        eps = cfg_compose(eps, eps_c, guidance.pos_weight)
    if guidance.lambda_neg:
        eps_neg = denoiser.predict(z_t, t, base.with_label(guidance.neg_embedding))
        eps = negative_compose(eps, eps_neg, guidance.lambda_neg)
    return eps
