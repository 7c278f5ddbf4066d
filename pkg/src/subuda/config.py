"""Flat key-value run configuration.

Grammar: a TOML document with top-level ``key = value`` pairs only (no
tables). Values are TOML integers, floats, booleans, strings or arrays.
List-valued keys (``kn``, ``hidden``, ``target_props``) also accept a
comma-separated string such as ``"4,1"``. ``kn = "auto"`` selects the
sub-graph scheme, which discovers the number of subtypes per class.

Keys fall into three groups: training (the ``TrainConfig`` field names),
the synthetic generator used by ``generate``, and run options. ``seed``
drives both the generator and training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomli

from .data import ConfigError
from .trainer import TrainConfig


def _num(kind):
    def parse(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {v!r}")
        if kind is int:
            if isinstance(v, float) and not v.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {v!r}")
            return int(v)
        return float(v)
    return parse


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected true or false, got {v!r}")
    return v


def _list(kind):
    item = _num(kind)

    def parse(key, v):
        if isinstance(v, str):
            parts = [p.strip() for p in v.split(",") if p.strip()]
            try:
                v = [kind(p) for p in parts]
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {v!r} as a list of {kind.__name__}") from None
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v]
        elif not isinstance(v, list):
            raise ConfigError(f"{key}: expected a list, got {v!r}")
        if not v:
            raise ConfigError(f"{key}: list is empty")
        return tuple(item(key, x) for x in v)
    return parse


def _kn(key, v):
    if isinstance(v, str) and v.strip().lower() == "auto":
        return None
    return _list(int)(key, v)


TRAIN_KEYS = {
    "alpha": _num(float), "beta": _num(float), "kn": _kn, "epsilon": _num(float),
    "tau": _num(float), "m": _num(int), "lr": _num(float), "momentum": _num(float),
    "batch": _num(int), "epochs": _num(int), "seed": _num(int), "ema": _num(float),
    "hidden": _list(int), "head_hidden": _num(int), "d_head": _num(int), "dropout": _num(float),
    "disable_omega": _bool, "disable_tau": _bool, "pooled_mu_st": _bool, "disable_head": _bool,
    "source_only_subtypes": _bool, "test_fraction": _num(float), "kmeans_n_init": _num(int),
}
GENERATOR_KEYS = {
    "n_classes": _num(int), "n_subtypes": _num(int), "dim": _num(int), "class_sep": _num(float),
    "subtype_spread": _num(float), "sigma": _num(float), "shift": _num(float),
    "coherence": _num(float), "target_props": _list(float), "n_source": _num(int),
    "n_target": _num(int), "layout_seed": _num(int),
}
RUN_KEYS = {
    "checkpoint_every": _num(int), "scan_class": _num(int), "consensus_resamples": _num(int),
    "consensus_rate": _num(float), "consensus_threshold": _num(float),
}
assert not (set(TRAIN_KEYS) & set(GENERATOR_KEYS)) and not (set(TRAIN_KEYS) & set(RUN_KEYS))
assert set(TRAIN_KEYS) == {f.name for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunOptions:
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    scan_class: Optional[int] = None  # class whose source features the K scan clusters; default last
    consensus_resamples: int = 50
    consensus_rate: float = 0.8
    consensus_threshold: float = 0.05


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: dict[str, Any] = field(default_factory=dict)
    run: RunOptions = field(default_factory=RunOptions)

    def snapshot(self) -> dict:
        """Plain-JSON view of every setting, defaults included."""
        train = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self.train).items()}
        if train["kn"] is None:
            train["kn"] = "auto"
        gen = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.generator.items()}
        return dict(train=train, generator=gen, run=dataclasses.asdict(self.run))


def parse_config(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(TRAIN_KEYS) - set(GENERATOR_KEYS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    train, gen, run = {}, {}, {}
    for key, v in values.items():
        if isinstance(v, dict):
            raise ConfigError(f"{key}: tables are not supported, use flat keys")
        if key in TRAIN_KEYS:
            train[key] = TRAIN_KEYS[key](key, v)
        elif key in GENERATOR_KEYS:
            gen[key] = GENERATOR_KEYS[key](key, v)
        else:
            run[key] = RUN_KEYS[key](key, v)
    cfg = RunConfig(TrainConfig(**train), gen, RunOptions(**run))
    cfg.train.validate()
    if cfg.run.checkpoint_every < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    return cfg


def parse_text(text: str) -> RunConfig:
    try:
        values = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"config syntax: {e}") from None
    return parse_config(values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        return parse_text(text)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
