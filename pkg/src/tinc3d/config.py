"""Run configuration: one nested JSON document per run.

Top-level keys::

    seed, out_dir, synth, sampler, augment, model {encoder, projector},
    loss, pretrain {epochs, warmup_epochs, base_lr, weight_decay,
    checkpoint_every}, eval

Every section maps onto the dataclass of the module that consumes it. Unknown
keys are rejected with an error that names the full dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .augment3d import AugmentConfig
from .evaluate import EvalConfig
from .losses import LossConfig
from .model import EncoderConfig, ProjectorConfig
from .pairs import SamplerConfig
from .pretrain import PretrainConfig
from .synthgen import SynthConfig

OUT_DIR_ENV = "TINC_OUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 400
    warmup_epochs: int = 10
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    checkpoint_every: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def output_root(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")

    def synth_config(self) -> SynthConfig:
        return dataclasses.replace(self.synth, seed=self.seed)

    def eval_config(self) -> EvalConfig:
        return dataclasses.replace(self.eval, seed=self.seed)

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        try:
            return PretrainConfig(epochs=p.epochs, warmup_epochs=p.warmup_epochs,
                                  base_lr=p.base_lr, weight_decay=p.weight_decay,
                                  seed=self.seed, checkpoint_every=p.checkpoint_every,
                                  loss=self.loss, sampler=self.sampler, augment=self.augment,
                                  encoder=self.model.encoder, projector=self.model.projector)
        except ValueError as exc:
            raise ConfigError(f"pretrain: {exc}") from exc


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _convert(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def build(cls, data: Any, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested sections."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {dotted!r}")
        kwargs[key] = _convert(hints[key], value, dotted)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def apply_overrides(data: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries on a nested dict; values parse as JSON, else string."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like dotted.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node[parts[-1]] = value
    return data


def load_run_config(path=None, overrides=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return build(RunConfig, apply_overrides(data, overrides))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def pretrain_config_from_dict(data: dict) -> PretrainConfig:
    """Inverse of ``dataclasses.asdict`` for :class:`PretrainConfig`."""
    return build(PretrainConfig, data)
