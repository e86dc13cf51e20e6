"""Run configuration: one structured file aggregating every sub-config.

Precedence: command-line flags > config file > built-in defaults. Unknown
keys anywhere in the file are rejected. The single top-level seed feeds
every sub-seed (data/init/order) unless a sub-config pins its own.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields, replace

import yaml

from .losses import LossConfig
from .model import ModelConfig
from .ssl import SslConfig
from .synthdata import DomainShift, GenConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    runs: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-4, total_steps=1200, schedule="one_cycle"))
    ssl: SslConfig = field(default_factory=SslConfig)
    paths: Paths = field(default_factory=Paths)


_NESTED = {
    (RunConfig, "data"): GenConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "pretrain"): TrainConfig,
    (RunConfig, "ssl"): SslConfig,
    (RunConfig, "paths"): Paths,
    (GenConfig, "shift"): DomainShift,
    (SslConfig, "loss"): LossConfig,
    (SslConfig, "unlabeled_train"): TrainConfig,
    (SslConfig, "finetune_train"): TrainConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _propagate_seed(cfg: RunConfig, file_data: dict) -> RunConfig:
    """Fill sub-seeds from the root seed unless the file pinned them."""
    def pinned(*path):
        d = file_data
        for p in path:
            if not isinstance(d, dict) or p not in d:
                return False
            d = d[p]
        return True

    s = cfg.seed
    data = cfg.data if pinned("data", "root_seed") else replace(cfg.data, root_seed=s)
    pre = cfg.pretrain if pinned("pretrain", "seed") else replace(cfg.pretrain, seed=s)
    ssl = cfg.ssl
    if not pinned("ssl", "seed"):
        ssl = replace(ssl, seed=s)
    if not pinned("ssl", "unlabeled_train", "seed"):
        ssl = replace(ssl, unlabeled_train=replace(ssl.unlabeled_train, seed=s))
    if not pinned("ssl", "finetune_train", "seed"):
        ssl = replace(ssl, finetune_train=replace(ssl.finetune_train, seed=s))
    return replace(cfg, data=data, pretrain=pre, ssl=ssl)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then flat CLI overrides like
    {"seed": 7, "ssl.iterations": 1}."""
    file_data: dict = {}
    if path:
        with open(path) as fh:
            if path.endswith(".json"):
                file_data = json.load(fh)
            else:
                file_data = yaml.safe_load(fh) or {}
    merged = dict(file_data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        d = merged
        parts = dotted.split(".")
        for p in parts[:-1]:
            d = d.setdefault(p, {})
            if not isinstance(d, dict):
                raise ConfigError(f"cannot override {dotted}: {p} is not a mapping")
        d[parts[-1]] = value
    cfg = _build(RunConfig, merged, "config")
    return _propagate_seed(cfg, merged)


def config_to_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name))
                for f in fields(cfg)}
    return cfg


def dump_config(cfg: RunConfig, path: str) -> None:
    """Serialize the fully-materialized effective config."""
    d = config_to_dict(cfg)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=True, default_flow_style=False)
    os.replace(tmp, path)


__all__ = ["ConfigError", "Paths", "RunConfig", "config_to_dict",
           "dump_config", "load_config"]
