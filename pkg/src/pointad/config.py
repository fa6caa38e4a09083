"""Dataclass configs for every stage and the merged run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .renderer import RenderConfig


class ConfigKeyError(KeyError):
    pass


@dataclass(frozen=True)
class AggregationConfig:
    k: int = 10
    alpha: float = 0.5
    sigma: float = 1.0


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "object-agnostic"
    length: int = 12
    init_std: float = 0.02
    class_name: Optional[str] = None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 4
    seed: int = 0
    variant: str = "pointad+"
    loss_weights: tuple = ()
    aux_class: str = ""
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr > 0, epochs >= 1, batch_size >= 1")
        if self.variant not in ("pointad", "pointad+"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", tuple(sorted(self.loss_weights.items())))
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def weights(self) -> dict:
        return dict(self.loss_weights)


@dataclass(frozen=True)
class InferenceConfig:
    smooth_k: int = 10
    smooth_sigma_scale: float = 1.0  # times the median nearest-neighbor distance


@dataclass(frozen=True)
class EvalConfig:
    fpr_limit: float = 0.3
    region_k: int = 8


_SECTIONS = {
    "render": RenderConfig,
    "encoder": EncoderConfig,
    "aggregation": AggregationConfig,
    "prompts": PromptConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
}
_TOP = {"views": 9, "cache_dir": None}


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigKeyError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


@dataclass(frozen=True)
class RunConfig:
    render: RenderConfig = RenderConfig()
    encoder: EncoderConfig = EncoderConfig()
    aggregation: AggregationConfig = AggregationConfig()
    prompts: PromptConfig = PromptConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    eval: EvalConfig = EvalConfig()
    views: int = 9
    cache_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS) - set(_TOP)
        if unknown:
            raise ConfigKeyError(f"unknown top-level config keys: {sorted(unknown)}")
        kw = {name: _build(sec, data.get(name, {}), name) for name, sec in _SECTIONS.items()}
        for k, default in _TOP.items():
            kw[k] = data.get(k, default)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["train"]["loss_weights"] = dict(self.train.loss_weights)
        for k in _TOP:
            out[k] = getattr(self, k)
        return json.loads(json.dumps(out))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def override(self, dotted: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; unknown keys are rejected."""
        data = self.to_dict()
        for key, value in dotted.items():
            if "." in key:
                sec, name = key.split(".", 1)
                if sec not in _SECTIONS:
                    raise ConfigKeyError(f"unknown config section {sec!r}")
                data[sec][name] = value
            else:
                data[key] = value
        return RunConfig.from_dict(data)


def smoke_config(overrides: Optional[dict] = None) -> RunConfig:
    """Small configuration used by the end-to-end smoke experiment."""
    base = RunConfig(
        render=RenderConfig(size=(112, 112), splat_radius=2),
        encoder=EncoderConfig(input_size=(112, 112)),
    )
    return base.override(overrides) if overrides else base


__all__ = [
    "AggregationConfig", "ConfigKeyError", "EncoderConfig", "EvalConfig", "InferenceConfig",
    "PromptConfig", "RenderConfig", "RunConfig", "TrainConfig", "smoke_config",
]
