"""Run configuration: dataclass, key-value file loading and seed streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .model import ModelConfig

REG_GRID = (1e-7, 1e-5, 1e-3)
PATH_ENV = {"data_dir": "SURGE_DATA_DIR", "out_dir": "SURGE_OUT_DIR"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # data: a prepared split directory, or the synthetic generator below
    data_dir: str | None = None
    out_dir: str | None = None
    synth_users: int = 2000
    synth_items: int = 500
    synth_clusters: int = 10
    synth_seq_len: int = 80
    synth_noise: float = 0.3
    synth_train_targets: int = 3
    neg_ratio: int = 1

    # model
    max_len: int = 50
    dim: int = 40
    heads: int = 2
    pooled_len: int = 10
    eps: float = 0.2
    k_hop: int = 1
    hidden: int | None = None
    att_hidden: int | None = None
    per_head_scores: bool = False
    fusion: bool = True
    cluster_aware: bool = True
    query_aware: bool = True
    extraction: bool = True
    readout: bool = True
    regularization: bool = True
    evolution: str = "augru"

    # optimisation
    lr: float = 1e-3
    batch_size: int = 500
    max_epochs: int = 30
    patience: int = 5
    l2: float = 1e-7
    reg_m: float = 1e-5
    reg_a: float = 1e-5
    reg_p: float = 1e-5
    seed: int = 0
    double: bool = False
    eval_batch_size: int = 2000

    # grids (positive values only)
    l2_grid: tuple[float, ...] = REG_GRID
    reg_grid: tuple[float, ...] = REG_GRID
    pooled_len_grid: tuple[int, ...] = (4, 8, 16)

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_grid"):
                setattr(self, f.name, tuple(getattr(self, f.name)))

    def validate(self) -> "RunConfig":
        if self.extraction and not 1 <= self.pooled_len <= self.max_len:
            raise ConfigError(f"pooled_len={self.pooled_len} must lie in [1, max_len={self.max_len}]")
        if not 0 < self.eps <= 1:
            raise ConfigError(f"eps={self.eps} outside (0, 1]")
        if self.evolution not in ("augru", "gru"):
            raise ConfigError(f"evolution must be augru or gru, got {self.evolution!r}")
        if self.k_hop < 1 or self.heads < 1 or self.dim < 1:
            raise ConfigError("k_hop, heads and dim must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size/max_epochs must be positive, patience non-negative")
        for name in ("l2_grid", "reg_grid", "pooled_len_grid"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ConfigError(f"{name} must be non-empty with positive values")
        if min(self.l2, self.reg_m, self.reg_a, self.reg_p, self.lr) < 0:
            raise ConfigError("regularization weights and lr must be non-negative")
        return self

    def model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(
            num_items=num_items, max_len=self.max_len, dim=self.dim, heads=self.heads,
            pooled_len=self.pooled_len, eps=self.eps, k_hop=self.k_hop,
            att_hidden=self.att_hidden, hidden=self.hidden, per_head_scores=self.per_head_scores,
            fusion=self.fusion, cluster_aware=self.cluster_aware, query_aware=self.query_aware,
            extraction=self.extraction, readout=self.readout, evolution=self.evolution,
        )

    @property
    def reg_weights(self) -> tuple[float, float, float]:
        if not (self.regularization and self.extraction):
            return (0.0, 0.0, 0.0)
        return (self.reg_m, self.reg_a, self.reg_p)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        # paths do not change results
        d = {k: v for k, v in self.to_dict().items() if k not in PATH_ENV}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(f: dataclasses.Field, raw: str) -> Any:
    raw = raw.strip()
    kind = str(f.type)
    if raw.lower() in ("none", "null", ""):
        return None
    if "tuple" in kind:
        item = float if "float" in kind else int
        return tuple(item(v) for v in raw.replace(",", " ").split())
    if kind.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def parse_overrides(pairs: dict[str, str]) -> dict[str, Any]:
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _coerce(known[key], raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    return out


def load_kv(path: str | Path) -> dict[str, Any]:
    """``key = value`` per line; ``#`` starts a comment."""
    pairs = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs)


def env_paths() -> dict[str, str]:
    return {k: os.environ[v] for k, v in PATH_ENV.items() if os.environ.get(v)}


def stream_seed(seed: int, name: str) -> int:
    """Independent named random stream derived from the root seed."""
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31 - 1)
