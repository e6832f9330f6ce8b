"""Pipeline configuration loaded from TOML with a strict schema."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

from .errors import OctagraphError
from .explain import DEFAULT_K, DEFAULT_STEPS
from .gnn import ModelConfig
from .hetero import ABLATIONS
from .raster import DEFAULT_PIXEL_SIZE_MM
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(OctagraphError):
    """Unknown keys, wrong types or out-of-range values in a config file."""


@dataclass
class DataConfig:
    pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM
    threshold: float = 0.5


@dataclass
class SplitConfig:
    folds: int = 6
    seed: int = 0
    test_fold: int = 0
    val_fold: int = 1


@dataclass
class ExplainConfig:
    k: int = DEFAULT_K
    steps: int = DEFAULT_STEPS
    output: str = "logit"
    top_nodes: int = 10
    top_features: int = 3


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def train_config(self) -> TrainConfig:
        """Training settings with the fold layout taken from the split section."""
        d = asdict(self.train)
        d.update(n_folds=self.split.folds, test_fold=self.split.test_fold, val_fold=self.split.val_fold)
        return TrainConfig(**d)


# keys accepted in [model] beyond the ModelConfig fields
MODEL_EXTRA = ("ablation",)
# ModelConfig/TrainConfig keys set elsewhere or not meant for files
HIDDEN = {"train": ("n_folds", "test_fold", "val_fold")}


def _check_type(section: str, key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
        value = tuple(value) if ok else value
    elif key == "class_weights":
        ok = isinstance(value, str) or (isinstance(value, list) and all(isinstance(v, (int, float)) for v in value))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(section: str, cls, table: dict, extra=()):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    default = cls()
    allowed = {f.name for f in fields(cls)} - set(HIDDEN.get(section, ()))
    unknown = sorted(set(table) - allowed - set(extra))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: _check_type(section, k, v, getattr(default, k)) for k, v in table.items() if k in allowed}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(d: dict) -> PipelineConfig:
    sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "split": SplitConfig,
                "explain": ExplainConfig}
    unknown = sorted(set(d) - set(sections))
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    model_table = dict(d.get("model", {}))
    ablation = model_table.pop("ablation", None)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"[model] ablation must be one of {sorted(ABLATIONS)}")
        if "relations" in model_table:
            raise ConfigError("[model] give either ablation or relations, not both")
        model_table["relations"] = list(ABLATIONS[ablation])
    built = {name: _build(name, cls, model_table if name == "model" else d.get(name, {}))
             for name, cls in sections.items()}
    cfg = PipelineConfig(**built)
    if not 0 < cfg.data.threshold <= 1 or cfg.data.pixel_size_mm <= 0:
        raise ConfigError("[data] threshold must lie in (0, 1] and pixel_size_mm be positive")
    s = cfg.split
    if s.folds < 2 or not (0 <= s.test_fold < s.folds and 0 <= s.val_fold < s.folds) or s.test_fold == s.val_fold:
        raise ConfigError("[split] needs folds >= 2 and distinct test/val folds within range")
    if cfg.explain.output not in ("logit", "probability") or cfg.explain.k < 1 or cfg.explain.steps < 8:
        raise ConfigError("[explain] output must be logit|probability, k >= 1 and steps >= 8")
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(d)
