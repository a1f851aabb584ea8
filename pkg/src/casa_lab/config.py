"""Versioned JSON run configuration with strict key checking."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cost import BenchConfig
from .errors import ConfigError
from .model import FusionConfig
from .toytask import DataConfig, TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "CASA_LAB_SEED"


@dataclass
class StreamConfig:
    frame_tokens: int = 64
    text_per_frame: int = 3
    cache_cap: int | None = None


def _build(cls, section: dict | None, where: str, drop=()):
    section = dict(section or {})
    allowed = {f.name for f in fields(cls)} - set(drop)
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class LabConfig:
    seed: int = 0
    model: FusionConfig = field(default_factory=lambda: FusionConfig(
        d_model=64, n_heads=4, n_layers=4, vocab_size=28, dtype="float32"))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> "LabConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"schema", "seed", "model", "data", "train", "stream", "bench"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f"config: \"schema\" must be {SCHEMA_VERSION}, got {d.get('schema')!r}")
        seed = int(d.get("seed", 0))
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                seed = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        model_d = dict(d.get("model") or {})
        unknown = set(model_d) - {f.name for f in fields(FusionConfig)}
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        defaults = asdict(cls().model)
        defaults.update(model_d)
        train = _build(TrainConfig, d.get("train"), "train", drop=("seed",))
        train.seed = seed
        bench = _build(BenchConfig, d.get("bench"), "bench", drop=("seed",))
        bench.seed = seed
        return cls(seed=seed, model=FusionConfig.from_dict(defaults),
                   data=_build(DataConfig, d.get("data"), "data"), train=train,
                   stream=_build(StreamConfig, d.get("stream"), "stream"), bench=bench)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train.pop("seed")
        bench = asdict(self.bench)
        bench.pop("seed")
        return {"schema": SCHEMA_VERSION, "seed": self.seed, "model": self.model.to_dict(),
                "data": asdict(self.data), "train": train, "stream": asdict(self.stream), "bench": bench}


def load_config(path: str | Path | None, env: dict | None = None) -> LabConfig:
    """Read a config file; ``None`` gives the defaults (still honouring the seed override)."""
    if path is None:
        return LabConfig.from_dict({"schema": SCHEMA_VERSION}, env)
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return LabConfig.from_dict(d, env)
