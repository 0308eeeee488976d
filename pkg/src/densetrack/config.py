"""YAML run configuration.

One file describes a whole run family: the scene family, which seeds form
the training / evaluation / export pools, the model, the training phases,
and the benchmark sweep.  Unknown keys are rejected so typos fail loudly,
and the canonical hash ties run manifests back to the exact configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig
from .synthdata import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataPools:
    """Seed pools drawn from the shared scene family."""

    train_seeds: tuple[int, ...] = (400, 401, 402)
    pose_only_seeds: tuple[int, ...] = ()
    eval_seeds: tuple[int, ...] = (500, 501)
    gen_seeds: tuple[int, ...] = (400, 401, 402)

    def __post_init__(self):
        if not self.train_seeds:
            raise ConfigError("train_seeds must not be empty")


@dataclass(frozen=True)
class PhaseSettings:
    index: int
    steps: int = 3000
    warmup: int = 100
    lr_scale: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    seed: int = 7
    length_range: tuple[int, int] = (2, 6)
    phases: tuple[PhaseSettings, ...] = (PhaseSettings(index=1),
                                         PhaseSettings(index=2))
    init_seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("at least one training phase required")


@dataclass(frozen=True)
class EvalSettings:
    mode: str = "both"  # tracking | reconstruction | both
    scale_mode: str = "per-seq"  # per-seq | global
    depth_filter: tuple[float, float] | None = None
    literal_scaling: bool = False

    def __post_init__(self):
        if self.mode not in ("tracking", "reconstruction", "both"):
            raise ConfigError(f"unknown eval mode {self.mode!r}")
        if self.scale_mode not in ("per-seq", "global"):
            raise ConfigError(f"unknown scale mode {self.scale_mode!r}")


@dataclass(frozen=True)
class BenchSettings:
    """Memory sweep shape: a fixed synthetic clip, varying query counts.

    ``query_counts`` entries are ints or the string "all" (every pixel).
    """

    height: int = 240
    width: int = 240
    patch_size: int = 16
    frames: int = 10
    dim: int = 96
    depth: int = 2
    num_heads: int = 4
    query_counts: tuple = (1000, 10000, 50000, "all")

    def resolved_counts(self) -> list[int]:
        out = []
        for q in self.query_counts:
            if q == "all":
                out.append(self.height * self.width)
            elif isinstance(q, int) and q >= 0:
                out.append(q)
            else:
                raise ConfigError(f"bad query count {q!r}")
        return out


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataPools = field(default_factory=DataPools)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def __post_init__(self):
        if (self.model.height, self.model.width) != (self.scene.height,
                                                     self.scene.width):
            raise ConfigError(
                f"model resolution {self.model.height}x{self.model.width} "
                f"does not match scene {self.scene.height}x{self.scene.width}")
        if self.model.patch_size != self.scene.patch_size:
            raise ConfigError("model and scene patch sizes differ")

    def scene_config(self, seed: int) -> SceneConfig:
        return dataclasses.replace(self.scene, seed=seed)


def _coerce(cls, value, context: str):
    """Build a dataclass from a mapping, recursing into nested fields."""
    if not isinstance(value, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(value).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(value) - set(fields)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, raw in value.items():
        kwargs[key] = _coerce_field(fields[key], raw, f"{context}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _coerce_field(f: dataclasses.Field, raw, context: str):
    if f.name == "phases":
        if not isinstance(raw, list):
            raise ConfigError(f"{context}: expected a list of phase mappings")
        return tuple(_coerce(PhaseSettings, p, f"{context}[{i}]")
                     for i, p in enumerate(raw))
    if f.name == "query_counts":
        if not isinstance(raw, list):
            raise ConfigError(f"{context}: expected a list")
        return tuple(raw)
    if isinstance(raw, list):
        return tuple(raw)
    return raw


_SECTIONS = {
    "scene": SceneConfig,
    "data": DataPools,
    "model": ModelConfig,
    "train": TrainSettings,
    "eval": EvalSettings,
    "bench": BenchSettings,
}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    kwargs = {name: _coerce(cls, raw[name], name)
              for name, cls in _SECTIONS.items() if name in raw}
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Canonical content hash: stable across key order and formatting."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot hash config value {value!r}")
