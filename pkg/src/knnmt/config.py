"""Experiment configuration: YAML with strict key checking.

Every field has a default matching the standard desk-scale task, so an empty
config is runnable; unknown keys anywhere are errors so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    v_src: int = 50
    v_tgt: int = 60
    shift_fraction: float = 0.3
    transition_sharpness: float = 3.0
    n_general: int = 4000
    n_indomain: int = 4000
    length_min: int = 5
    length_max: int = 15
    # in-domain corpus split; train builds the datastore, dev trains heads
    train_ratio: float = 0.5
    dev_ratio: float = 0.25
    test_ratio: float = 0.25


@dataclass
class BaseModelSection:
    emb_dim: int = 16
    hidden_dim: int = 32
    epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 64


@dataclass
class HeadSection:
    k: int = 8
    hidden_wp: int = 4
    hidden_dc: int = 32
    alpha0: float = 1.0
    beta: float = 1000.0
    sigma: float = 0.01
    learning_rate: float = 3e-4
    batch_size: int = 32
    total_steps: int = 5000
    key_noise: bool = True
    pseudo_pair: bool = True
    decay: bool = True
    shared_encoder: bool = True
    squared_distances: bool = False


@dataclass
class EvalSection:
    lambda_grid: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    temp_grid: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    confidence_bins: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    prune_fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    prelim_intervals: list = field(default_factory=lambda: [[0, 20], [20, 40], [40, 60], [60, 80], [80, 100]])


@dataclass
class ExperimentConfig:
    seed: int = 1
    out_dir: str = "runs/default"
    task: TaskSection = field(default_factory=TaskSection)
    base_model: BaseModelSection = field(default_factory=BaseModelSection)
    head: HeadSection = field(default_factory=HeadSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        t = self.task
        if not (t.v_src >= 4 and t.v_tgt >= t.v_src):
            raise ConfigError("task: need v_src >= 4 and v_tgt >= v_src")
        if not 0.0 <= t.shift_fraction <= 1.0:
            raise ConfigError("task: shift_fraction must lie in [0, 1]")
        if abs(t.train_ratio + t.dev_ratio + t.test_ratio - 1.0) > 1e-9:
            raise ConfigError("task: split ratios must sum to 1")
        if self.head.k < 1:
            raise ConfigError("head: k must be at least 1")
        if not 0.0 <= self.head.alpha0 <= 1.0:
            raise ConfigError("head: alpha0 must lie in [0, 1]")
        if self.head.beta <= 0:
            raise ConfigError("head: beta must be positive")
        if self.head.sigma < 0:
            raise ConfigError("head: sigma must be non-negative")


_SECTIONS = {"task": TaskSection, "base_model": BaseModelSection,
             "head": HeadSection, "eval": EvalSection}


def _build_section(cls, data: dict[str, Any], path: str):
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{path}.{key}'")
    return cls(**data)


def config_from_dict(data: dict[str, Any] | None) -> ExperimentConfig:
    data = dict(data or {})
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    for key in data:
        if key not in ("seed", "out_dir"):
            raise ConfigError(f"unknown key '{key}'")
    cfg = ExperimentConfig(seed=int(data.get("seed", 1)),
                           out_dir=str(data.get("out_dir", "runs/default")), **kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | None, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Config from a YAML file (or defaults), with optional CLI overrides."""
    raw = None
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(raw)
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    cfg.validate()
    return cfg
