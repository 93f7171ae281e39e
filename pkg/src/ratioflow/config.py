"""Declarative run configuration (TOML), strictly validated.

Every section and key is listed in ``DEFAULTS``; anything else is rejected.
``ratioflow config print-defaults`` prints the document below.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigurationError
from .flow_model import ModelConfig, TrainConfig
from .ratio import SolverConfig
from .schedules import Schedule

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "schedule": {"kind": "II", "sigma_min": 0.1, "lambda": 0.0},
    "model": ModelConfig().to_dict(),
    "train": {
        "learning_rate": 1e-4,
        "steps": 20_000,
        "batch_size": 256,
        "dropout_beta": 0.0,
        "t_window": [1e-3, 1.0 - 1e-3],
        "w_vel": 1.0,
        "w_score": 1.0,
    },
    "solver": SolverConfig().to_dict(),
    "data": {"path": ""},
    "output": {"dir": ""},
    "benchmark": {
        "gaussians": {"s": 1.0, "d": 2, "n_train": 10_000, "n_test": 1_000, "n_eval": 1_000},
        "mi": {"d": 20, "n_samples": 100_000, "n_eval": 1_000, "n_eval_oracle": 10_000},
        "da": {"a_values": [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5],
               "n_per_cluster": 1_000, "n_eval": 250},
    },
    # metric name -> {"min": x} and/or {"max": x}; checked by `benchmark`
    "assert": {},
}

_FREE_TABLES = {("assert",)}


def _merge(base: dict, override: dict, path=()):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if path in _FREE_TABLES:
            if not isinstance(value, dict) or not set(value) <= {"min", "max"}:
                raise ConfigurationError(
                    f"assert entry {where!r} must be a table with 'min' and/or 'max'")
            out[key] = dict(value)
            continue
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            if isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must not be a table")
            if isinstance(base[key], bool) != isinstance(value, bool):
                raise ConfigurationError(f"config key {where!r} has the wrong type")
            if isinstance(base[key], (int, float)) and not isinstance(value, (int, float)):
                raise ConfigurationError(f"config key {where!r} must be a number")
            if isinstance(base[key], str) and not isinstance(value, str):
                raise ConfigurationError(f"config key {where!r} must be a string")
            if isinstance(base[key], list) and not isinstance(value, list):
                raise ConfigurationError(f"config key {where!r} must be a list")
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def schedule(self) -> Schedule:
        return Schedule.from_dict(self.raw["schedule"])

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(self.raw["model"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.raw["train"], seed=self.seed))

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig.from_dict(self.raw["solver"])

    @property
    def benchmark(self) -> dict:
        return self.raw["benchmark"]

    @property
    def assertions(self) -> dict:
        return self.raw["assert"]

    def validate(self) -> "RunConfig":
        """Build every typed section once so errors surface before compute."""
        try:
            self.schedule, self.model, self.train, self.solver  # noqa: B018
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self


def from_dict(doc: dict) -> RunConfig:
    return RunConfig(_merge(DEFAULTS, doc)).validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig(copy.deepcopy(DEFAULTS)).validate()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return from_dict(doc)


def defaults_toml() -> str:
    return tomli_w.dumps(DEFAULTS)
