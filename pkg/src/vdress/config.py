"""Nested run configuration read from JSON, with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .codec import CodecConfig
from .errors import ConfigError
from .training import BaseConfig, TrainConfig
from .unet import ModelConfig, check_lambda


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    w: float = 7.0
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("sampler.steps must be a positive integer")
        try:
            check_lambda(self.lam)
        except ValueError as exc:
            raise ConfigError(f"sampler.lam: {exc}") from exc


@dataclass(frozen=True)
class DataConfig:
    """Synthetic training set: ``pairs`` garments from generator seed ``seed``."""

    pairs: int = 8
    seed: int = 0
    per_garment: int = 1

    def __post_init__(self):
        if self.pairs < 1 or self.per_garment < 1:
            raise ConfigError("data.pairs and data.per_garment must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    """Sampling seeds used when scoring a checkpoint; disjoint from training seeds."""

    seeds: tuple = (1000, 1001, 1002)
    metric: str = "cami-u"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        if self.metric not in ("cami-u", "cami-s"):
            raise ConfigError("eval.metric must be cami-u or cami-s")


def desk_train_config(**kw) -> TrainConfig:
    """Adapter training at desk scale.

    With only T=100 steps the schedule must reach near-pure noise
    (alpha_bar_T ~ 1e-6) for sampling from N(0, I) to be consistent, and a
    few thousand steps need a larger learning rate than long runs do.
    """
    base = dict(learning_rate=1e-3, steps=2000, T=100, beta_start=0.05, beta_end=0.2)
    base.update(kw)
    return TrainConfig(**base)


SECTIONS = {
    "model": ModelConfig,
    "codec": CodecConfig,
    "train": TrainConfig,
    "base": BaseConfig,
    "sampler": SamplerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    base: BaseConfig = field(default_factory=BaseConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        built = {}
        for name, typ in SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, Mapping):
                raise ConfigError(f"{name} must be an object")
            fields = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - fields
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            try:
                built[name] = desk_train_config(**section) if name == "train" else typ(**section)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        if built["codec"].latent_channels != built["model"].latent_shape[0]:
            raise ConfigError("codec.latent_channels must equal model.latent_shape[0]")
        if built["train"].variant != built["model"].variant:
            raise ConfigError("train.variant must equal model.variant")
        return cls(**built)

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def override(self, pairs: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"train.steps": 10, ...}`` style overrides and revalidate."""
        d = self.to_dict()
        for key, value in pairs.items():
            if value is None:
                continue
            section, _, leaf = key.partition(".")
            if section not in d or not leaf:
                raise ConfigError(f"bad override key {key!r}")
            d[section][leaf] = value
        if "model.variant" in pairs and pairs["model.variant"] is not None and "train.variant" not in pairs:
            d["train"]["variant"] = pairs["model.variant"]
        return RunConfig.from_dict(d)


def _plain(x):
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    return x


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
