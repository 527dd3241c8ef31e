"""Flat run configuration: TOML file, CLI overrides, validation and hashing."""

from __future__ import annotations

import hashlib
import json
import os
import sys
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diffusion import DiffusionSchedule
from .engine import ConfigError, OptimizerConfig
from .net import NetworkConfig


@dataclass
class RunConfig:
    # paths
    corpus: str = "data/corpus.jsonl"
    vocab: str = "data/vocab.json"
    ckpt_dir: str = "runs/ckpt"
    log: str = "runs/train_log.csv"
    toy_spec: str = ""
    # schedule
    T: int = 50
    sigma: float = 0.01
    delta: float = 0.0125
    # network
    layers: int = 6
    width: int = 128
    hops: int = 3
    cutoff: float = 10.0
    time_dim: int = 16
    frozen_frag_coords: bool = False
    # optimiser
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 2000
    ckpt_every: int = 500
    # misc
    seed: int = 0
    vocab_size: int = 12
    delta_cov: float = 1.25
    heavy_only: bool = False
    refs: str = "embed"
    num_samples: int = 0
    workers: int = 0  # 0 = all available cores

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def field_type(cls, key: str):
        return type(getattr(cls(), key))

    @classmethod
    def from_mapping(cls, data: dict, source: str = "config") -> "RunConfig":
        cfg = cls()
        for k, v in data.items():
            if k not in cls.__dataclass_fields__:
                raise ConfigError(f"{source}: unknown key {k!r}")
            setattr(cfg, k, _coerce(k, v, cls.field_type(k), source))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found for key 'config': {path}")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config: {path}: {exc}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config: {path}: tables are not supported (flat keys only): {nested}")
        return cls.from_mapping(data, str(path))

    def override(self, changes: dict) -> "RunConfig":
        merged = asdict(self)
        merged.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_mapping(merged, "command line")

    def validate(self) -> None:
        try:
            self.schedule()
            self.network()
            self.optimizer()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config: {exc}") from None
        if self.refs not in ("embed", "file"):
            raise ConfigError(f"config: key 'refs' must be 'embed' or 'file', got {self.refs!r}")
        if self.vocab_size < 1:
            raise ConfigError("config: key 'vocab_size' must be >= 1")
        if not self.delta_cov > 0:
            raise ConfigError("config: key 'delta_cov' must be positive")
        if self.num_samples < 0 or self.ckpt_every < 0 or self.workers < 0:
            raise ConfigError("config: num_samples, ckpt_every and workers must be >= 0")

    def resolved_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def require_file(self, key: str) -> Path:
        p = Path(getattr(self, key))
        if not p.is_file():
            raise ConfigError(f"config: key {key!r} points to a missing file: {p}")
        return p

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.sigma, self.delta)

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            layers=self.layers, width=self.width, hops=self.hops, cutoff=self.cutoff,
            time_dim=self.time_dim, frozen_frag_coords=self.frozen_frag_coords,
        )

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            weight_decay=self.weight_decay, batch_size=self.batch_size, steps=self.steps,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(key, value, typ, source):
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: key {key!r} expects {typ.__name__}, got {value!r}") from None


def stage_rng(root_seed: int, stage: str) -> np.random.Generator:
    """Independent stream per named pipeline stage, derived from the root seed."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return np.random.default_rng(ss)


def stage_seed(root_seed: int, stage: str) -> int:
    return int(stage_rng(root_seed, stage).integers(0, 2**63 - 1))
