"""Run configuration: validated models, ``--set`` overrides and object builders."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .cascade import CascadeConfig, Region, StageConfig
from .codec import DecodeTiling, LinearLatentCodec
from .compose import DEFAULT_LAMBDA_NEG, DEFAULT_NEGATIVE_PROMPT
from .denoise import ConsistencyDenoiser, LabelRouter, LinearDenoiser, StationaryGaussianDenoiser
from .schedule import Sampler, make_schedule

Scalars = Union[float, list[float]]


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SamplerCfg(_Model):
    kind: Literal["dpm", "ddpm"] = "dpm"
    steps: int = Field(50, ge=1)
    schedule: Literal["linear", "cosine"] = "linear"
    T: int = Field(1000, ge=1)
    beta_min: float = Field(1e-4, ge=0)
    beta_max: float = Field(2e-2, lt=1)
    sigma: Literal["zero", "beta"] = "zero"


class DenoiserCfg(_Model):
    """``stationary``: unconditional Gaussian field; ``consistency``: centred on the
    upsampled low-res input; ``linear``: a trained model file."""

    kind: Literal["stationary", "consistency", "linear"]
    mean: Scalars = 0.0
    var: Scalars = 1.0
    length_scale: float = Field(3.0, gt=0)
    nugget: float = Field(0.0, ge=0, le=1)
    detail_var: Scalars = 0.0
    path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "linear" and not self.path:
            raise ValueError("linear denoiser needs 'path'")
        for name in ("var", "detail_var"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be non-negative")
        return self


class StageCfg(_Model):
    name: str
    lambda_neg: float | None = Field(None, ge=0)
    denoiser: DenoiserCfg
    negative: DenoiserCfg | None = None
    tile: int = Field(128, ge=1)
    stride: int = Field(64, ge=1)


class WorldCfg(_Model):
    base_zoom: int = Field(ge=0, le=23)
    x0: int = Field(0, ge=0)
    y0: int = Field(0, ge=0)
    nx: int = Field(1, ge=1)
    ny: int = Field(1, ge=1)
    tile_size: int = Field(256, ge=4)


class ChunkCfg(_Model):
    size: int = Field(256, ge=1)
    halo: int = Field(128, ge=0)
    budget: int | None = Field(None, ge=1)


class DecodeCfg(_Model):
    window: int = Field(512, ge=1)
    overlap: float = Field(0.25, gt=0, le=0.5)


class CodecCfg(_Model):
    kind: Literal["mean_preserving", "file"] = "mean_preserving"
    channels: int = Field(4, ge=3, le=48)
    path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "file" and not self.path:
            raise ValueError("codec kind 'file' needs 'path'")
        return self


def _default_base() -> StageCfg:
    return StageCfg(
        name="base",
        denoiser=DenoiserCfg(kind="stationary", var=[0.25, 0.25, 0.25, 0.05], length_scale=3.0),
    )


class GenerateConfig(_Model):
    seed: int = 0
    threads: int = Field(1, ge=1)
    world: WorldCfg
    stages: list[StageCfg]
    base: StageCfg = Field(default_factory=_default_base)
    sampler: SamplerCfg = Field(default_factory=SamplerCfg)
    chunk: ChunkCfg = Field(default_factory=ChunkCfg)
    std_fraction: float = Field(0.25, gt=0)
    decode: DecodeCfg = Field(default_factory=DecodeCfg)
    codec: CodecCfg = Field(default_factory=CodecCfg)
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT


class AblateConfig(_Model):
    """``tiling`` mode uses the canvas fields; ``direct`` mode needs ``cascade``."""

    seed: int = 0
    threads: int = Field(1, ge=1)
    canvas: int = Field(256, ge=1)
    tile: int = Field(128, ge=1)
    stride: int = Field(64, ge=1)
    std_fraction: float = Field(0.25, gt=0)
    sampler: SamplerCfg = Field(default_factory=SamplerCfg)
    denoiser: DenoiserCfg = Field(default_factory=lambda: DenoiserCfg(kind="stationary", length_scale=3.0))
    codec: CodecCfg = Field(default_factory=CodecCfg)
    cascade: GenerateConfig | None = None
    # denoiser for sampling the final zoom directly; defaults to the cascade's base denoiser
    direct: DenoiserCfg | None = None


class SuperresConfig(_Model):
    """One x4 stage applied to an input image whose side is a multiple of ``tile_size``."""

    seed: int = 0
    threads: int = Field(1, ge=1)
    zoom: int = Field(10, ge=0, le=21)
    x0: int = Field(0, ge=0)
    y0: int = Field(0, ge=0)
    tile_size: int = Field(256, ge=4)
    stage: StageCfg
    sampler: SamplerCfg = Field(default_factory=SamplerCfg)
    chunk: ChunkCfg = Field(default_factory=ChunkCfg)
    std_fraction: float = Field(0.25, gt=0)
    decode: DecodeCfg = Field(default_factory=DecodeCfg)
    codec: CodecCfg = Field(default_factory=CodecCfg)
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT


class MetricsConfig(_Model):
    seed: int = 0
    dim: int = Field(2048, ge=1)
    size: int = Field(64, ge=4)
    subset_size: int = Field(1000, ge=2)
    n_subsets: int = Field(100, ge=1)


class IngestConfig(_Model):
    """Either ``url`` (a ``{z}/{x}/{y}`` or ``{quadkey}`` template) or ``mock``."""

    url: str | None = None
    mock: bool = False
    mock_max_zoom: int = 20
    rate: float = Field(10.0, gt=0)
    retries: int = Field(3, ge=0)
    backoff: float = Field(0.5, ge=0)
    tile_size: int = Field(256, ge=1)
    locations: list[tuple[float, float]] = Field(default_factory=list)
    n_random: int = Field(0, ge=0)
    zooms: list[int] = Field(default_factory=lambda: list(range(10, 21)))
    stack_side: int = Field(2048, ge=1)
    urban: bool = False
    seed: int = 0
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if bool(self.url) == self.mock:
            raise ValueError("set exactly one of 'url' or 'mock'")
        if not self.locations and not self.n_random:
            raise ValueError("give 'locations' or 'n_random'")
        return self


class SynthConfig(_Model):
    seed: int = 0
    zooms: list[int] = Field(default_factory=lambda: list(range(10, 21)))
    stack_side: int = Field(2048, ge=8)
    detail: float = Field(12.0, ge=0)
    decay: float = Field(0.85, gt=0)
    count: int = Field(1, ge=1)


# ---------------------------------------------------------------------------
# loading and overrides


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.0.c=value`` to a nested dict/list document (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty key in override {assignment!r}")
    node = doc
    for i, p in enumerate(parts[:-1]):
        nxt_is_index = parts[i + 1].isdigit()
        if isinstance(node, list):
            idx = int(p)
            if idx >= len(node):
                raise ConfigError(f"override {key}: index {idx} out of range")
            node = node[idx]
        else:
            if p not in node or node[p] is None:
                node[p] = [] if nxt_is_index else {}
            node = node[p]
    last = parts[-1]
    value = parse_value(raw)
    if isinstance(node, list):
        idx = int(last)
        if idx >= len(node):
            raise ConfigError(f"override {key}: index {idx} out of range")
        node[idx] = value
    else:
        node[last] = value
    return doc


def load_document(path: str | None, overrides=()) -> dict:
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    doc = copy.deepcopy(doc)
    for a in overrides:
        apply_override(doc, a)
    return doc


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def validate(model: type[_Model], doc: dict):
    try:
        return model.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def dump(cfg: _Model) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# builders


def build_sampler(c: SamplerCfg) -> Sampler:
    sched = make_schedule(c.schedule, c.T, beta_min=c.beta_min, beta_max=c.beta_max, sigma=c.sigma)
    return Sampler(sched, c.steps, c.kind)


def build_codec(c: CodecCfg) -> LinearLatentCodec:
    if c.kind == "file":
        return LinearLatentCodec.load(c.path)
    return LinearLatentCodec.mean_preserving(c.channels)


def _arr(v):
    return np.asarray(v, dtype=np.float64)


def build_denoiser(c: DenoiserCfg, codec: LinearLatentCodec, sampler: Sampler):
    sched = sampler.sched
    if c.kind == "stationary":
        return StationaryGaussianDenoiser(_arr(c.mean), _arr(c.var), sched, c.length_scale, c.nugget)
    if c.kind == "consistency":
        return ConsistencyDenoiser(codec, sched, _arr(c.detail_var), c.length_scale, c.nugget)
    model = LinearDenoiser.load(c.path)
    if model.latent_channels != codec.channels:
        raise ConfigError(f"{c.path}: model has {model.latent_channels} channels, codec {codec.channels}")
    return model


def _negative_default(c: DenoiserCfg) -> DenoiserCfg | None:
    # the "blurry, low res" counterpart of a consistency stage adds no detail
    if c.kind == "consistency":
        return c.model_copy(update={"detail_var": 0.0})
    return None


def build_stage(c: StageCfg, codec, sampler: Sampler, negative_prompt: str, default_lambda: float = 0.0) -> StageConfig:
    lam = default_lambda if c.lambda_neg is None else c.lambda_neg
    den = build_denoiser(c.denoiser, codec, sampler)
    if lam > 0:
        neg_cfg = c.negative or _negative_default(c.denoiser)
        if neg_cfg is None:
            raise ConfigError(f"stage {c.name}: lambda_neg > 0 needs a 'negative' denoiser")
        den = LabelRouter(den, {negative_prompt: build_denoiser(neg_cfg, codec, sampler)})
    return StageConfig(c.name, den, lam, negative_prompt, sampler, c.tile, c.stride)


def build_cascade(cfg: GenerateConfig) -> tuple[CascadeConfig, Region]:
    codec = build_codec(cfg.codec)
    sampler = build_sampler(cfg.sampler)
    base = build_stage(cfg.base, codec, sampler, cfg.negative_prompt)
    stages = tuple(
        build_stage(s, codec, sampler, cfg.negative_prompt, DEFAULT_LAMBDA_NEG.get(s.name, 0.0)) for s in cfg.stages
    )
    try:
        casc = CascadeConfig(
            base_zoom=cfg.world.base_zoom,
            base=base,
            stages=stages,
            codec=codec,
            seed=cfg.seed,
            tile_size=cfg.world.tile_size,
            chunk=cfg.chunk.size,
            halo=cfg.chunk.halo,
            budget=cfg.chunk.budget,
            std_fraction=cfg.std_fraction,
            decode=DecodeTiling(cfg.decode.window, cfg.decode.overlap),
            threads=cfg.threads,
        )
        region = Region(cfg.world.base_zoom, cfg.world.x0, cfg.world.y0, cfg.world.nx, cfg.world.ny)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return casc, region
