"""Experiment configuration: JSON with sections model, env, objective, schedule, telemetry."""
from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .objective import ObjectiveConfig
from .proxy import NoiseThresholdRule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WarmStartConfig:
    """Supervised pre-training that stands in for a base model before RL."""

    steps: int = 1500
    learning_rate: float = 0.01
    batch_size: int = 128
    connector_rate: float = 0.1
    connector_accuracy: float = 0.5
    irrelevant_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        for name in ("connector_rate", "connector_accuracy", "irrelevant_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    context_window: int = 8
    embed_dim: int = 16
    hidden_size: int = 64
    attention: bool = False
    output_scale: float = 0.1
    init_seed: int = 0
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)

    def __post_init__(self):
        for name in ("vocab_size", "context_window", "embed_dim", "hidden_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class EnvConfig:
    family: str = "spark_gated"
    difficulty: int = 1
    p_direct: float = 0.6
    eval_size: int = 500
    eval_seed_offset: int = 1_000_000

    def __post_init__(self):
        from .envs import DIFFICULTY_BOUNDS, FAMILIES
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        lo, hi = DIFFICULTY_BOUNDS[self.family]
        if not lo <= self.difficulty <= hi:
            raise ValueError(f"difficulty must lie in [{lo}, {hi}]")
        if not 0.0 <= self.p_direct <= 1.0:
            raise ValueError("p_direct must lie in [0, 1]")


@dataclass(frozen=True)
class TrainSchedule:
    regime: str = "off_policy"
    rollout_batch: int = 64
    group_size: int = 8
    mini_batch: int = 8
    learning_rate: float = 0.01
    max_steps: int = 2000
    max_response_len: int = 32
    eval_every: int = 50
    seed: int = 0
    temperature: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if self.regime not in ("on_policy", "off_policy"):
            raise ValueError(f"regime must be 'on_policy' or 'off_policy', got {self.regime!r}")
        for name in ("rollout_batch", "mini_batch", "max_response_len", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.regime == "off_policy" and self.rollout_batch % self.mini_batch:
            raise ValueError("rollout_batch must be divisible by mini_batch")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive when set")

    @property
    def updates_per_rollout(self) -> int:
        return 1 if self.regime == "on_policy" else self.rollout_batch // self.mini_batch


@dataclass(frozen=True)
class TelemetryConfig:
    enabled: bool = True
    probe_every: int = 10
    subsample_rate: float = 0.05
    probe_seed: int = 7919
    density_window: int = 100
    density_bins: int = 50
    low_prob_window: float = 0.1
    plots: bool = True

    def __post_init__(self):
        if self.probe_every < 1:
            raise ValueError("probe_every must be positive")
        if not 0.0 <= self.subsample_rate <= 1.0:
            raise ValueError("subsample_rate must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"objective.variant": "grpo"})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            set_dotted(d, key, value)
        return from_dict(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    return obj


def set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"{key}: unknown field")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"{key}: unknown field")
    node[parts[-1]] = copy.deepcopy(value)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
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
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field" if path else f"{unknown[0]}: unknown section")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = ["ConfigError", "EnvConfig", "ExperimentConfig", "ModelConfig", "NoiseThresholdRule",
           "ObjectiveConfig", "TelemetryConfig", "TrainSchedule", "WarmStartConfig", "dump_config",
           "from_dict", "load_config", "set_dotted"]
