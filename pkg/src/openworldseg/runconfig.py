"""Flat key=value run configuration.

Unknown keys are rejected outright. Defaults follow the published
hyperparameters where one exists (T=3, lambda_vl=0.01, beta=20, gamma=0.8,
lambda_novel=1.5, SGD momentum 0.9 at lr 2e-2 with decay 1e-4); the rest
are desk-scale choices.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 42
    dataset_dir: str = "data"
    checkpoint_dir: str = "runs/checkpoint"
    results_dir: str = "runs/results"
    # shapes-world
    image_size: int = 32
    train_scenes: int = 200
    val_scenes: int = 50
    test_scenes: int = 50
    noise: float = 0.05
    boundary_ignore: int = 1
    # metric space + losses
    t_value: float = 3.0
    lambda_vl: float = 0.01
    # backbone + optimisation
    hidden_channels: int = 16
    num_conv_layers: int = 4
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    iterations: int = 2000
    hflip: bool = True
    # anomaly mixture
    beta: float = 20.0
    gamma: float = 0.8
    # open-set threshold: explicit value or "auto" (calibrated quantile)
    lambda_out: float | None = None
    target_fpr: float = 0.05
    # incremental learning
    mode: str = "npm"
    shots: int = 5
    max_shots: int = 5
    lambda_novel: float = 1.5
    plm_iterations: int = 500
    plm_learning_rate: float | None = None  # None: 0.01 multi-shot / 0.001 one-shot
    novel_class: str = ""  # empty: first held-out class in the dataset

    def validate(self):
        if self.mode not in ("npm", "plm"):
            raise ConfigError(f"mode must be npm or plm, got {self.mode!r}")
        if self.lambda_out is not None and not 0.0 <= self.lambda_out <= 1.0:
            raise ConfigError(f"lambda_out must lie in [0,1] or be auto, got {self.lambda_out}")
        if not 0.0 <= self.target_fpr < 1.0:
            raise ConfigError(f"target_fpr must lie in [0,1), got {self.target_fpr}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.shots < 1 or self.shots > self.max_shots:
            raise ConfigError(f"shots must lie in 1..{self.max_shots}, got {self.shots}")
        for name in ("train_scenes", "val_scenes", "test_scenes", "iterations", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELDS = {f.name: f for f in fields(RunConfig)}
_OPTIONAL_FLOATS = {"lambda_out", "plm_learning_rate"}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if key in _OPTIONAL_FLOATS:
        if raw.lower() in ("auto", "none", ""):
            return None
        return float(raw)
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    return raw


def apply_setting(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    key = key.strip().replace("-", "_")
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(cfg, key, _parse_value(key, raw))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from exc
    return cfg


def parse_config_text(text: str, cfg: RunConfig | None = None, name: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{name}:{lineno}: expected key = value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file first, then key=value overrides, then validation."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg = parse_config_text(p.read_text(), cfg, name=str(p))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg.validate()
