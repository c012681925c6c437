"""Run configuration: YAML file plus command-line overrides.

Resolution order, lowest to highest: built-in defaults, the dataset preset,
the config file, explicit flags. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class AttackSection:
    latent_epsilon: float = 0.01  # step per query, latent units
    pixel_epsilon: float = 0.02  # step per query, pixel units
    bound_beta: float = 0.1  # l-inf radius for PGD / MIFGSM
    queries: int = 100
    momentum: float = 1.0
    target: str = "real"
    early_stop: bool = True
    ascent: bool = False  # step along +sign(grad) instead of descending
    mask: str = "Full"
    methods: list[str] = field(default_factory=lambda: ["latent", "fgsm", "pgd", "mifgsm"])


@dataclass
class FinetuneSection:
    lambda_mse: float = 1.0
    lambda_lpips: float = 0.8
    lambda_id: float = 0.5
    steps: int = 2000  # optimizer steps
    batch_size: int = 8
    learning_rate: float = 1e-4
    holdout_fraction: float = 0.1
    perceptual: str = "gradmag"


@dataclass
class AblationSection:
    level_epsilon: float = 0.01
    epsilons: list[float] = field(default_factory=lambda: [0.005, 0.01, 0.02])
    detector: str | None = None  # None picks the first registered detector


@dataclass
class MetricsSection:
    tv_scale: float = 1e4


@dataclass
class ToySection:
    n_detectors: int = 4
    n_finetune: int = 200  # real + fake images, half each
    n_attack: int = 40  # fake images attacked per detector and method
    detector_train: int = 300
    n_visualize: int = 4


@dataclass
class RunConfig:
    backend: str = "toy"
    backend_options: dict = field(default_factory=dict)
    manifest: str | None = None  # CSV with image_id,path[,label,video_id]
    preset: str = "toy"
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs/latest"
    attack: AttackSection = field(default_factory=AttackSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    toy: ToySection = field(default_factory=ToySection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


# Per-dataset defaults for full-scale runs on real data. ``toy`` is the
# desk-scale calibration for the analytic stack.
PRESETS: dict[str, dict] = {
    "toy": {},
    "celebdf": {
        "attack": {"latent_epsilon": 0.0006, "pixel_epsilon": 0.007},
        "finetune": {"steps": 80000},
        "ablation": {"level_epsilon": 0.0004, "epsilons": [0.0006, 0.0008, 0.001, 0.0012]},
    },
    "dfdc": {
        "attack": {"latent_epsilon": 0.001, "pixel_epsilon": 0.011},
        "finetune": {"steps": 80000},
        "ablation": {"level_epsilon": 0.0008, "epsilons": [0.0006, 0.0008, 0.001, 0.0012]},
    },
    "ffpp": {
        "attack": {"latent_epsilon": 0.001, "pixel_epsilon": 0.015},
        "finetune": {"steps": 80000},
        "ablation": {"level_epsilon": 0.0012, "epsilons": [0.0006, 0.0008, 0.001, 0.0012]},
    },
}


def _merge(obj, updates: dict, where: str = ""):
    """Applies ``updates`` onto dataclass ``obj`` in place, rejecting unknown keys."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(updates).__name__}")
    known = {f.name: f for f in fields(obj)}
    for key, value in updates.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            _merge(current, value, path)
        else:
            setattr(obj, key, _coerce(current, value, path))


def _coerce(current, value, path):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{path} expects a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            elem = type(current[0]) if current else None
            return [elem(v) if elem else v for v in value]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ValueError
            return dict(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path} has invalid value {value!r}") from None
    return value


def set_dotted(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def resolve_config(path: str | Path | None = None, overrides: dict | None = None,
                   preset: str | None = None) -> RunConfig:
    """Builds a RunConfig from defaults, preset, file and overrides."""
    file_data: dict = {}
    if path is not None:
        try:
            file_data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    overrides = copy.deepcopy(overrides or {})
    chosen = preset or overrides.get("preset") or file_data.get("preset") or "toy"
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig()
    _merge(cfg, copy.deepcopy(PRESETS[chosen]))
    _merge(cfg, file_data)
    _merge(cfg, overrides)
    cfg.preset = chosen
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .attack import METHODS
    from .core import LEVELS

    bad = [m for m in cfg.attack.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown attack methods {bad}; choose from {list(METHODS)}")
    if cfg.attack.mask not in LEVELS:
        raise ConfigError(f"attack.mask must be one of {LEVELS}")
    if cfg.attack.target not in ("real", "fake"):
        raise ConfigError("attack.target must be 'real' or 'fake'")
    if cfg.attack.queries < 1:
        raise ConfigError("attack.queries must be >= 1")
    if not 0 <= cfg.attack.pixel_epsilon <= cfg.attack.bound_beta <= 1:
        raise ConfigError("need 0 <= attack.pixel_epsilon <= attack.bound_beta <= 1")
    if cfg.attack.latent_epsilon < 0:
        raise ConfigError("attack.latent_epsilon must be >= 0")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.finetune.steps < 0 or cfg.finetune.batch_size < 1:
        raise ConfigError("finetune.steps must be >= 0 and finetune.batch_size >= 1")
    if min(cfg.finetune.lambda_mse, cfg.finetune.lambda_lpips, cfg.finetune.lambda_id) < 0:
        raise ConfigError("finetune weights must be non-negative")
    if not cfg.ablation.epsilons:
        raise ConfigError("ablation.epsilons must be non-empty")
