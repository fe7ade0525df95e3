"""Experiment configuration: strict parsing, defaults, validation.

Configs are JSON files mirroring the dataclass tree below. Unknown keys and
duplicate keys are hard errors; every default is materialized so the echoed
config fully reproduces a run.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field

from .losses import AttackConfig
from .models import Hyperparameters

MODES = ("standard", "robust")
METHODS = ("anchor_query", "stored_only")
QUERY_METHODS = ("feature_knn", "largest_logit", "random", "none")
ENSEMBLE_ATTACKS = ("transfer", "adaptive")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | manifest
    classes: int = 10
    image_size: int = 16
    channels: int = 1
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.08
    max_shift: int = 3
    seed: int | None = None  # None: derived from the master seed
    path: str | None = None  # manifest directory


@dataclass
class PoolSection:
    kind: str = "synthetic"  # synthetic | manifest | none
    items: int = 3000
    template_factor: float = 2.0
    distractor_smooth: float | None = 1.0
    seed: int | None = None
    path: str | None = None


@dataclass
class SplitSection:
    classes_per_task: int = 2
    task_count: int = 5
    val_fraction: float = 0.1


@dataclass
class QuerySection:
    method: str = "feature_knn"
    budget_per_class: int = 150
    normalize_features: bool = False
    aggregate: str = "min_distance"


@dataclass
class TrainingSection:
    epochs: int = 20
    base_lr: float = 0.01
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = 0.1
    momentum: float = 0.9
    batch_cb: int = 64
    batch_rs: int = 64
    batch_ud: int = 128
    steps_per_epoch: int | None = None
    random_crop: bool = True
    random_flip: bool = True
    crop_pad: int = 2


@dataclass
class AttackSection:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    eval_steps: int = 20
    eval_random_start: bool = False

    def train_config(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha,
                            steps=self.steps, random_start=self.random_start)

    def eval_config(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha,
                            steps=self.eval_steps,
                            random_start=self.eval_random_start)


@dataclass
class EnsembleSection:
    enabled: bool = False
    k_neighbors: int = 50
    attack_mode: str = "transfer"


@dataclass
class BackboneSection:
    conv_channels: tuple[int, ...] = (16, 32)
    feature_dim: int = 64
    norm_groups: int = 4


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pool: PoolSection = field(default_factory=PoolSection)
    split: SplitSection = field(default_factory=SplitSection)
    memory_budget_per_class: int = 10
    query: QuerySection = field(default_factory=QuerySection)
    mode: str = "standard"
    method: str = "anchor_query"
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    eval_auxiliary: bool = False
    output_dir: str | None = None

    def to_dict(self) -> dict:
        def _plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: _plain(getattr(obj, f.name))
                        for f in dataclasses.fields(obj)}
            if isinstance(obj, tuple):
                return [_plain(v) for v in obj]
            return obj

        return _plain(self)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"duplicate key {key!r} in config")
        out[key] = value
    return out


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            if type(None) in typing.get_args(hint):
                return None
            raise ConfigError(f"{path}: null not allowed")
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        inner = typing.get_args(hint)[0]
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {hint!r}")


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            where = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], where)
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"{path or cls.__name__}: {err}") from err


def _manifest_classes(root: str) -> int:
    manifest = os.path.join(root, "train.jsonl")
    if not os.path.isfile(manifest):
        raise ConfigError(f"dataset manifest not found: {manifest}")
    labels = set()
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                labels.add(json.loads(line)["label"])
    return len(labels)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg.method!r}")
    if cfg.query.method not in QUERY_METHODS:
        raise ConfigError(f"query.method must be one of {QUERY_METHODS}")
    if cfg.query.aggregate not in ("min_distance", "per_anchor"):
        raise ConfigError("query.aggregate must be 'min_distance' or 'per_anchor'")
    if cfg.ensemble.attack_mode not in ENSEMBLE_ATTACKS:
        raise ConfigError(f"ensemble.attack_mode must be one of {ENSEMBLE_ATTACKS}")
    if cfg.ensemble.k_neighbors < 1:
        raise ConfigError("ensemble.k_neighbors must be >= 1")
    if cfg.memory_budget_per_class < 0:
        raise ConfigError("memory_budget_per_class must be >= 0")
    if cfg.query.budget_per_class < 0:
        raise ConfigError("query.budget_per_class must be >= 0")
    if cfg.split.classes_per_task < 1 or cfg.split.task_count < 1:
        raise ConfigError("split sizes must be >= 1")
    if not (0.0 < cfg.split.val_fraction < 1.0):
        raise ConfigError("split.val_fraction must lie in (0, 1)")
    for name in ("batch_cb", "batch_rs", "batch_ud"):
        if getattr(cfg.training, name) < 1:
            raise ConfigError(f"training.{name} must be >= 1")

    if cfg.dataset.kind == "synthetic":
        total_classes = cfg.dataset.classes
    elif cfg.dataset.kind == "manifest":
        if not cfg.dataset.path:
            raise ConfigError("dataset.path required for manifest datasets")
        if not os.path.isdir(cfg.dataset.path):
            raise ConfigError(f"dataset.path does not exist: {cfg.dataset.path}")
        total_classes = _manifest_classes(cfg.dataset.path)
    else:
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'manifest'")
    needed = cfg.split.classes_per_task * cfg.split.task_count
    if needed > total_classes:
        raise ConfigError(
            f"split needs {needed} classes ({cfg.split.classes_per_task} x "
            f"{cfg.split.task_count}) but the dataset has {total_classes}"
        )

    if cfg.pool.kind == "manifest":
        if not cfg.pool.path:
            raise ConfigError("pool.path required for manifest pools")
        manifest = os.path.join(cfg.pool.path, "pool.jsonl")
        if not os.path.isfile(manifest):
            raise ConfigError(f"pool manifest not found: {manifest}")
    elif cfg.pool.kind not in ("synthetic", "none"):
        raise ConfigError("pool.kind must be 'synthetic', 'manifest', or 'none'")
    if (cfg.method == "anchor_query" and cfg.query.method != "none"
            and cfg.query.budget_per_class > 0 and cfg.pool.kind == "none"
            and cfg.split.task_count > 1):
        raise ConfigError("query is enabled but pool.kind is 'none'")

    # constructing these re-runs their own invariant checks
    try:
        cfg.attack.train_config()
        cfg.attack.eval_config()
    except ValueError as err:
        raise ConfigError(f"attack: {err}") from err
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate_config(_build(ExperimentConfig, data))


def load_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh, object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
