"""Experiment configuration: nested dataclasses read from an INI-style file.

Section ``[train]`` with ``steps = 500`` is the dotted key ``train.steps``;
every dotted key can also be overridden from the command line.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionVariant
from .toy_plm import EncoderConfig
from .trainer import TrainConfig


@dataclass
class PretrainConfig:
    steps: int = 2000
    corpus_size: int = 4000
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 1


@dataclass
class BudgetConfig:
    l: int = 16
    s: int = 10
    mode: str = "exact"


@dataclass
class FusionConfig:
    variant: str = FusionVariant.CROSS_ATTENTION.value


@dataclass
class ProjectionConfig:
    n_experts: int = 4
    seed: int = 0


@dataclass
class EptConfig:
    use_fusion: bool = True
    use_projection: bool = True


@dataclass
class TaskConfig:
    name: str = "pattern"
    n_train: int = 512
    n_eval: int = 256
    seed: int = 0


@dataclass
class HarnessConfig:
    encoder: str = "runs/encoder"
    tasks: str = "parity,majority,pattern"
    seeds: str = "0,1,2,3,4"
    length_fractions: str = "0,0.2,0.4,0.6,0.8,1.0"
    length_steps: int = 200
    spaces: str = "2,3,4,5,6,7,8"
    lr_prompt_grid: str = "0.3,0.4,0.5"
    lr_lowrank_grid: str = "1e-4,5e-4,5e-3"
    source_task: str = "majority"
    target_task: str = "majority"
    target_task_seed: int = 1
    k: int = 16
    jobs: int = 1


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    ept: EptConfig = field(default_factory=EptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)


def dotted_keys(cfg: ExperimentConfig | None = None) -> dict[str, type]:
    cfg = cfg or ExperimentConfig()
    out = {}
    for sec in dataclasses.fields(cfg):
        for f in dataclasses.fields(getattr(cfg, sec.name)):
            out[f"{sec.name}.{f.name}"] = type(getattr(getattr(cfg, sec.name), f.name))
    return out


def _coerce(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted-key string values applied."""
    kinds = dotted_keys(cfg)
    sections = {sec.name: dataclasses.asdict(getattr(cfg, sec.name))
                for sec in dataclasses.fields(cfg)}
    for key, raw in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        sections[sec][name] = _coerce(key, str(raw), kinds[key])
    try:
        return ExperimentConfig(**{
            sec.name: type(getattr(cfg, sec.name))(**sections[sec.name])
            for sec in dataclasses.fields(cfg)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise ConfigError(f"cannot read config file {path}")
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                values[f"{sec}.{key}"] = raw
    values.update(overrides or {})
    return apply_overrides(ExperimentConfig(), values)


def to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        lines.append(f"[{sec.name}]")
        for k, v in dataclasses.asdict(getattr(cfg, sec.name)).items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {raw!r}") from None


def float_list(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {raw!r}") from None


def str_list(raw: str) -> list[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]
