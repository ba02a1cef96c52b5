"""Run configuration: a tree of dataclasses with JSON round-tripping.

Every field has a default, so an empty JSON object is a complete config.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .anatomy import Thresholds
from .ppo import PpoConfig
from .reward_dataset import AXES, PerturbationConfig
from .synth import DomainShiftConfig, ShapeConfig


@dataclass
class DataConfig:
    n_source_train: int = 200
    n_source_val: int = 50
    n_source_test: int = 50
    n_target_train: int = 500
    n_target_test: int = 100
    shift: DomainShiftConfig = field(default_factory=DomainShiftConfig)
    shape: ShapeConfig = field(default_factory=ShapeConfig)


@dataclass
class NetConfig:
    widths: list = field(default_factory=lambda: [8, 16, 32])
    head_gain: float = 0.1


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 16


@dataclass
class RewardTrainConfig:
    epochs: int = 8
    lr: float = 3e-3
    batch_size: int = 16
    holdout_fraction: float = 0.1


@dataclass
class RunConfig:
    seed: int = 7
    iterations: int = 3
    subset_size: int = 150
    ppo_passes: int = 2
    ppo_on_cumulative: bool = False
    reinit_value_each_iteration: bool = False
    ablate: list = field(default_factory=list)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reward: RewardTrainConfig = field(default_factory=RewardTrainConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)

    def validate(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.subset_size < 1:
            raise ValueError(f"subset_size must be >= 1, got {self.subset_size}")
        if self.iterations * self.subset_size > self.data.n_target_train:
            raise ValueError(f"iterations x subset_size = {self.iterations * self.subset_size} exceeds "
                             f"{self.data.n_target_train} target training images")
        unknown = set(self.ablate) - set(AXES)
        if unknown:
            raise ValueError(f"unknown ablation axes {sorted(unknown)}; choose from {list(AXES)}")
        if set(self.ablate) == set(AXES):
            raise ValueError("cannot disable every reward-dataset axis: the reward dataset would be empty")
        return self

    @property
    def axes(self):
        return [a for a in AXES if a not in self.ablate]


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(cls, data: dict | None):
    """Build dataclass ``cls`` from a (possibly partial) nested dict."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(extra)}")
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        t = hints.get(f.name)
        if dataclasses.is_dataclass(t):
            v = from_dict(t, v)
        elif isinstance(v, list) and f.name.endswith("_range"):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path:
        with open(path) as f:
            data = json.load(f)
    data.update(overrides or {})
    return from_dict(RunConfig, data).validate()


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2)
