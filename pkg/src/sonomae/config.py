"""JSON run-configuration parsing for the CLI.

A config file is one JSON object with optional sections `preprocess`,
`model`, `pretrain`, `finetune` and `eval`. Unknown keys anywhere are
rejected with the offending key named, so a typo can never silently fall
back to a default. Command-line flags win over file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .annomask import CleanConfig, InpaintConfig
from .corpus import PreprocessConfig
from .imgproc import NormalizationSpec
from .model import ModelConfig
from .train import AugmentConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]!r}")


def _build(cls, d: dict, where: str, nested: dict | None = None):
    nested = nested or {}
    names = [f.name for f in fields(cls)]
    _check_keys(d, names, where)
    kwargs = {}
    for k, v in d.items():
        if k in nested and isinstance(v, dict):
            kwargs[k] = _build(nested[k], v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def parse_preprocess(d: dict) -> PreprocessConfig:
    d = dict(d)
    if isinstance(d.get("clean"), dict):
        d["clean"] = _build(CleanConfig, d["clean"], "preprocess.clean", nested={"inpaint": InpaintConfig})
    return _build(PreprocessConfig, d, "preprocess")


def parse_model(d: dict) -> ModelConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset != "tiny":
            raise ConfigError(f"unknown model preset {preset!r}")
        _check_keys(d, [f.name for f in fields(ModelConfig)], "model")
        return ModelConfig.tiny(**d)
    return _build(ModelConfig, d, "model")


@dataclass
class PretrainSection:
    epochs: int = 1
    batch_size: int = 16
    base_lr: float = 0.001
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    include_optimizer_state: bool = False


def parse_pretrain(d: dict) -> PretrainSection:
    d = dict(d)
    if d.get("augment", "missing") is None:
        d.pop("augment")
        section = _build(
            PretrainSection, d, "pretrain",
            nested={"optimizer": OptimizerConfig, "normalization": NormalizationSpec},
        )
        section.augment = None
        return section
    return _build(
        PretrainSection, d, "pretrain",
        nested={"optimizer": OptimizerConfig, "augment": AugmentConfig, "normalization": NormalizationSpec},
    )


@dataclass
class FinetuneSection:
    epochs: int = 1
    batch_size: int = 16
    base_lr: float = 0.001
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig | None = None
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    freeze_encoder: bool = False
    pooling: str | None = None
    max_steps: int | None = None
    grid_learning_rates: tuple[float, ...] = (0.0003, 0.001)
    grid_weight_decays: tuple[float, ...] = (0.01, 0.05)
    grid_epochs: int = 1


def parse_finetune(d: dict) -> FinetuneSection:
    d = dict(d)
    if d.get("augment", "missing") is None:
        d.pop("augment")
    return _build(
        FinetuneSection, d, "finetune",
        nested={"optimizer": OptimizerConfig, "augment": AugmentConfig, "normalization": NormalizationSpec},
    )


@dataclass
class EvalSection:
    batch_size: int = 32
    split: str = "test"
    svg: bool = False
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)


def parse_eval(d: dict) -> EvalSection:
    return _build(EvalSection, d, "eval", nested={"normalization": NormalizationSpec})


SECTIONS = {
    "preprocess": parse_preprocess,
    "model": parse_model,
    "pretrain": parse_pretrain,
    "finetune": parse_finetune,
    "eval": parse_eval,
}


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    raw: dict = field(default_factory=dict)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, SECTIONS, "config")
    cfg = RunConfig(raw=raw)
    for name, parser in SECTIONS.items():
        if name in raw:
            setattr(cfg, name, parser(raw[name]))
    return cfg
