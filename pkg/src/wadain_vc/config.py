"""Hierarchical run configuration: YAML file + dotted ``key=value`` overrides."""
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Union

import yaml

from .acoustic_features import FeatureConfig
from .evaluation import ClassifierConfig
from .networks import ModelConfig
from .training import TrainingConfig

CACHE_ENV = "WADAIN_VC_CACHE"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    audio_root: Optional[str] = None
    manifest: Optional[str] = None
    cache_dir: Optional[str] = None
    holdout_fraction: float = 0.1
    workers: int = 1
    n_speakers: Optional[int] = None
    m_samples: Union[int, str] = "full"
    subset_seed: int = 0
    subset_manifest: Optional[str] = None


@dataclass
class ConvertConfig:
    checkpoint: Optional[str] = None
    sources: List[str] = field(default_factory=list)
    target_speaker: Optional[str] = None
    reference: Optional[str] = None


@dataclass
class EvaluateConfig:
    conversion_manifest: Optional[str] = None
    condition: str = ""
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    convert: ConvertConfig = field(default_factory=ConvertConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def cache_dir(self) -> str:
        return self.data.cache_dir or os.environ.get(CACHE_ENV) or os.path.join(self.out_dir, "features")

    def validate(self):
        self.features.validate()
        self.model.validate()
        if self.model.generator.mcep_dim != self.features.mcep_order + 1:
            raise ConfigError(f"model.generator.mcep_dim={self.model.generator.mcep_dim} must equal "
                              f"features.mcep_order + 1 = {self.features.mcep_order + 1}")
        self.training.validate(self.model.generator.time_factor)
        m = self.data.m_samples
        if not (m == "full" or (isinstance(m, int) and m > 0)):
            raise ConfigError(f"data.m_samples must be a positive int or 'full', got {m!r}")
        return self


def _merge(obj, d: dict, prefix=""):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if k not in names:
            raise ConfigError(f"unknown config key {key!r}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            _merge(cur, v, key + ".")
        else:
            setattr(obj, k, _coerce(v, hints[k], key))


def _coerce(v, tp, key):
    if v is None:
        return None
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(v, a, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: cannot interpret {v!r} as {tp}")
    if origin in (list, List):
        if not isinstance(v, list):
            raise ConfigError(f"{key}: expected a list")
        return list(v)
    if tp is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{key}: expected true/false, got {v!r}")
        return v
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected an integer, got {v!r}")
        return v
    if tp is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {v!r}")
        return float(v)
    if tp is str:
        if not isinstance(v, str):
            raise ConfigError(f"{key}: expected a string, got {v!r}")
        return v
    return v


def parse_override(s: str) -> dict:
    if "=" not in s:
        raise ConfigError(f"override {s!r} is not key=value")
    key, val = s.split("=", 1)
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(val)
    return out


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            _merge(cfg, yaml.safe_load(fh) or {})
    for o in overrides:
        _merge(cfg, parse_override(o))
    if seed is not None:
        cfg.seed = seed
        cfg.training.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    return cfg.validate()


def config_keys(obj=None, prefix="") -> List[str]:
    obj = obj if obj is not None else RunConfig()
    keys = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            keys += config_keys(v, f"{prefix}{f.name}.")
        else:
            keys.append(f"{prefix}{f.name}")
    return keys


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
