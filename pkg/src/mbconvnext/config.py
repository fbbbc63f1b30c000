"""Single declarative run configuration (YAML), strict about unknown keys."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .augment import AugmentPolicy, SplitSpec
from .errors import InvalidConfig
from .imaging import PreprocessConfig
from .model import ModelConfig
from .train import CallbackConfig, PhaseConfig


@dataclass
class SynthConfig:
    n_pos: int = 4
    n_neg: int = 4
    dims: tuple = (128, 128, 40)
    lesion_hu: tuple = (-520.0, -320.0)
    lesion_radius: tuple = (0.05, 0.09)


@dataclass
class PathsConfig:
    volumes: str = "volumes"  # .nii files + labels.csv
    labels: str = ""  # defaults to <volumes>/labels.csv
    dataset: str = "dataset"
    split_train: str = "train_split"  # split output, before balancing
    train: str = "train"
    val: str = "val"
    run: str = "run"
    report: str = ""  # defaults to <run>/report
    checkpoint: str = ""  # defaults to <run>/best_auc.ckpt


@dataclass
class TrainingConfig:
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig(12, 1e-3, 32, 1))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(8, 1e-6, 32, 2))
    callbacks: CallbackConfig = field(default_factory=CallbackConfig)
    class_weights: tuple = (1.0, 1.0)
    init_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def with_seed(self, seed):
        """Copy with every seed set to ``seed``."""
        cfg = from_dict(to_dict(self))
        cfg.seed = seed
        cfg.split.seed = seed
        cfg.augment.seed = seed
        cfg.training.init_seed = seed
        return cfg


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def to_dict(cfg) -> dict:
    return _plain(cfg)


def _coerce(default, value, where):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise InvalidConfig(f"{where}: expected a mapping")
        return _build(type(default), value, where, default)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{where}: expected a list")
        if len(default) and len(value) == len(default):
            return tuple(_coerce(d, v, f"{where}[{i}]") for i, (d, v) in enumerate(zip(default, value)))
        return tuple(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{where}: expected a list")
        return [list(v) if isinstance(v, tuple) else v for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(f"{where}: expected a string")
        return value
    return value


def _build(cls, data, where, default=None):
    default = default if default is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"{where or 'config'}: unknown keys {unknown}")
    kw = {}
    for f in dataclasses.fields(cls):
        cur = getattr(default, f.name)
        key = f"{where}.{f.name}" if where else f.name
        kw[f.name] = _coerce(cur, data[f.name], key) if f.name in data else cur
    return cls(**kw)


def from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidConfig("config root must be a mapping")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    cfg.model.validate()
    cfg.training.phase1.validate()
    cfg.training.phase2.validate()
    if cfg.training.phase1.phase != 1 or cfg.training.phase2.phase != 2:
        raise InvalidConfig("training.phase1/phase2 must have phase 1/2")
    cfg.training.callbacks.validate()
    if not 0.0 < cfg.split.train_fraction < 1.0:
        raise InvalidConfig("split.train_fraction must be in (0, 1)")
    if cfg.augment.target_per_class < 0:
        raise InvalidConfig("augment.target_per_class must be >= 0")
    if cfg.preprocess.normalize not in ("slice", "volume"):
        raise InvalidConfig("preprocess.normalize must be 'slice' or 'volume'")
    if sorted(cfg.preprocess.order) != ["clahe", "normalize", "resize"]:
        raise InvalidConfig("preprocess.order must be a permutation of resize, normalize, clahe")
    return cfg


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"config is not valid YAML: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
