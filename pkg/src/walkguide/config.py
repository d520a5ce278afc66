"""JSON configuration file: engine, TAP, training and metric settings.

Every section and field is optional; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .engine import EngineConfig
from .hplanner.backends import BackendDescriptor
from .polm import PolmConfig
from .tap.config import TapConfig
from .tap.policy import TriggerPolicy


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    stop_at_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("epochs >= 1, lr > 0 and 0 <= momentum < 1 are required")


@dataclass(frozen=True)
class MetricsConfig:
    micro_f1: bool = False


@dataclass(frozen=True)
class CliConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    tap: TapConfig = field(default_factory=TapConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    mock_responses: str | None = None  # path to {"table": {...}, "fallback": "..."}


def _build(cls, data, where: str, exclude=(), **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**{k: v for k, v in data.items() if k not in extra}, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> CliConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(doc) - {f.name for f in fields(CliConfig)})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")

    eng = dict(doc.get("engine", {}))
    if not isinstance(eng, dict):
        raise ConfigError("engine: expected an object")
    sub = {
        "polm": _build(PolmConfig, eng.get("polm", {}), "engine.polm"),
        "policy": _build(TriggerPolicy, eng.get("policy", {}), "engine.policy", exclude=("last_fire_ms",)),
        "backend": _build(BackendDescriptor, eng.get("backend", {}), "engine.backend"),
    }
    for k in sub:
        eng.pop(k, None)
    engine = _build(EngineConfig, {**eng, **sub}, "engine", **sub)

    tap = _build(TapConfig, doc.get("tap", {}), "tap")
    if tap.n_history != engine.n_history and "tap" in doc and "n_history" in doc["tap"]:
        raise ConfigError(f"tap.n_history={tap.n_history} disagrees with engine.n_history={engine.n_history}")
    if tap.n_history != engine.n_history:
        tap = TapConfig.from_dict({**tap.to_dict(), "n_history": engine.n_history})
    mock = doc.get("mock_responses")
    if mock is not None and not isinstance(mock, str):
        raise ConfigError("mock_responses: expected a path string")
    return CliConfig(
        engine=engine,
        tap=tap,
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        metrics=_build(MetricsConfig, doc.get("metrics", {}), "metrics"),
        mock_responses=mock,
    )


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        cfg = config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cfg.mock_responses is not None and not Path(cfg.mock_responses).is_absolute():
        cfg = CliConfig(cfg.engine, cfg.tap, cfg.train, cfg.metrics, str(path.parent / cfg.mock_responses))
    return cfg
