"""Run configuration: JSON file, defaults for every field, strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .episodes import DatasetConfig, split
from .experiment import PretrainConfig
from .fem import PATHS, ScaleSet
from .model import VARIANTS, ModelConfig, OptimConfig
from .prior import PriorConfig
from .tensor import ContractError


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DatasetSection:
    path: str = "data"
    size: int = 32
    seed: int = 0
    n_classes: int = 12
    per_class: int = 60


@dataclass
class FoldSection:
    index: int = 0
    scheme: str = "contiguous"


@dataclass
class PriorSection:
    feature_source: str = "fixed-high"
    reduction: str = "max"
    support_rep: str = "per-pixel"


@dataclass
class ModelSection:
    variant: str = "full"
    channels: int = 64
    scales: list[int] = field(default_factory=lambda: [8, 4, 2])
    path: str = "TD"
    prior: PriorSection = field(default_factory=PriorSection)
    freeze: bool = True
    sigma: float = 1.0


@dataclass
class PretrainSection:
    widths: list[int] = field(default_factory=lambda: [32, 48, 64, 64])
    epochs: int = 16
    lr: float = 0.05
    batch_size: int = 8
    weights: str | None = None


@dataclass
class OptimSection:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 300
    episodes: int = 8


@dataclass
class EvalSection:
    shot: int = 1
    episodes: int = 2000
    repeat: int = 1
    seed: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    fold: FoldSection = field(default_factory=FoldSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ derived objects

    def dataset_config(self) -> DatasetConfig:
        d = self.dataset
        return DatasetConfig(n_classes=d.n_classes, per_class=d.per_class, size=d.size, seed=d.seed)

    def fold_split(self):
        return split(self.dataset.n_classes, self.fold.index, self.fold.scheme)

    def model_config(self) -> ModelConfig:
        m = self.model
        prior = PriorConfig(m.prior.feature_source, m.prior.reduction, m.prior.support_rep)
        return ModelConfig(channels=m.channels, scales=tuple(m.scales), path=m.path, prior=prior,
                           sigma=m.sigma, freeze_backbone=m.freeze, seed=self.seed)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(o.base_lr, o.momentum, o.weight_decay, o.power, o.max_iter, o.episodes)

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(tuple(p.widths), p.epochs, p.lr, p.batch_size)

    def validate(self) -> "RunConfig":
        """Raise ConfigError naming the first invalid field."""
        checks = [
            ("fold.index", self.fold.index in (0, 1, 2, 3), "must be 0..3"),
            ("fold.scheme", self.fold.scheme in ("contiguous", "strided"), "must be contiguous or strided"),
            ("dataset.size", self.dataset.size > 0 and self.dataset.size % 4 == 0, "must be a positive multiple of 4"),
            ("dataset.n_classes", self.dataset.n_classes % 4 == 0 and 4 <= self.dataset.n_classes <= 12,
             "must be 4, 8 or 12"),
            ("dataset.per_class", self.dataset.per_class >= 2, "must be at least 2"),
            ("model.variant", self.model.variant in VARIANTS, f"must be one of {VARIANTS}"),
            ("model.path", self.model.path in PATHS, f"must be one of {PATHS}"),
            ("model.channels", self.model.channels >= 1, "must be positive"),
            ("model.sigma", self.model.sigma >= 0, "must be non-negative"),
            ("optim.max_iter", self.optim.max_iter >= 1, "must be positive"),
            ("optim.episodes", self.optim.episodes >= 1, "must be positive"),
            ("optim.base_lr", self.optim.base_lr > 0, "must be positive"),
            ("eval.shot", self.eval.shot >= 1, "must be at least 1"),
            ("eval.episodes", self.eval.episodes >= 1, "must be positive"),
            ("eval.repeat", self.eval.repeat >= 1, "must be positive"),
            ("pretrain.widths", len(self.pretrain.widths) == 4 and min(self.pretrain.widths) >= 1,
             "must be four positive widths"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ConfigError(f"{name}: {why}")
        try:
            self.model_config()
            ScaleSet(tuple(self.model.scales), self.model.path)
        except ContractError as exc:
            raise ConfigError(f"model: {exc}") from None
        return self


# ---------------------------------------------------------------- (de)serialization

def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        else:
            kwargs[name] = _coerce(current, value, path)
    return replace(defaults, **kwargs)


def _coerce(default: Any, value: Any, path: str) -> Any:
    if value is None:
        return value
    if default is None:
        # optional file paths
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers")
        return list(value)
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(data)


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return loads(p.read_text())


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys (``model.channels``) on top of ``cfg``; flags win over the file."""
    data = to_dict(cfg)
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"{key}: unknown key")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown key")
        node[parts[-1]] = value
    return from_dict(data)
