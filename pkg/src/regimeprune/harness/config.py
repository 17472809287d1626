"""Flat key/value sweep configuration (a TOML subset: one ``key = value`` per line)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from ..data import DataSplit, gen_gaussian_blobs, gen_spirals, load_idx_subset, split_dataset
from ..landscape import TwinSpec
from ..nn import ModelConfig
from ..optimize import SgdConfig, TrainSpec
from ..prune import PruneSpec
from ..regimes import Thresholds

TEMPERATURE_KNOBS = ("epochs", "batch_size", "rho")
LOAD_KNOBS = ("density", "width_scale", "depth")
DATASETS = ("spirals", "blobs", "idx")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    # axes; temperature values are listed coldest first
    temperature_knob: str = "epochs"
    temperature_values: tuple = (80, 40, 20, 10)
    load_knob: str = "density"
    load_values: tuple = (0.5, 0.1)
    seeds: tuple = (0, 1, 2)
    # dataset
    dataset: str = "spirals"
    num_classes: int = 2
    samples_per_class: int = 2000
    noise: float = 0.15
    turns: float = 1.75
    spread: float = 0.3
    dim: int = 2
    idx_images: str = ""
    idx_labels: str = ""
    max_per_class: int = 100
    data_seed: int = 3
    split_seed: int = 0
    test_fraction: float = 0.2
    # model
    base_width: int = 256
    depth: int = 2
    width_scale: float = 1.0
    dtype: str = "float32"
    # dense training
    epochs: int = 80
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    rho: float = 0.0
    # pruning
    prune_strategy: str = "uniform"
    target_density: float = 0.1
    exclude_output_layer: bool = True
    # twin retraining
    retrain_epochs: int = 40
    retrain_lr: float = 0.05
    twin_seeds: tuple = (1, 2)
    # metrics and decision thresholds
    lmc_grid_points: int = 11
    cka_samples: int = 6400
    cka_seed: int = 0
    epsilon: float = -0.05
    alpha: int = 2
    rho_grid: tuple = (0.0, 0.1, 0.2, 0.5, 0.8)
    workers: int = 1

    def __post_init__(self):
        for name in ("temperature_values", "load_values", "seeds", "twin_seeds", "rho_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.temperature_knob not in TEMPERATURE_KNOBS:
            raise ConfigError(f"temperature_knob must be one of {TEMPERATURE_KNOBS}")
        if self.load_knob not in LOAD_KNOBS:
            raise ConfigError(f"load_knob must be one of {LOAD_KNOBS}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if not self.temperature_values or not self.load_values or not self.seeds:
            raise ConfigError("temperature_values, load_values and seeds must be non-empty")
        vals = list(self.temperature_values)
        # temperature must not drop as the list index grows (repeats are allowed)
        colder = (lambda a, b: b < a) if self.temperature_knob == "rho" else (lambda a, b: b > a)
        if any(colder(a, b) for a, b in zip(vals, vals[1:])):
            raise ConfigError(
                f"temperature_values {vals} must be ordered coldest to hottest "
                f"({'increasing' if self.temperature_knob == 'rho' else 'decreasing'} {self.temperature_knob})"
            )
        if len(set(self.twin_seeds)) != 2 or len(self.twin_seeds) != 2:
            raise ConfigError("twin_seeds must be two distinct integers")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lmc_grid_points < 2:
            raise ConfigError("lmc_grid_points must be >= 2")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        defaults = cls()
        coerced = {}
        for key, value in values.items():
            coerced[key] = _coerce(key, value, getattr(defaults, key))
        try:
            return replace(defaults, **coerced)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SweepConfig":
        path = Path(path)
        try:
            with path.open("rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, found table(s) {nested}")
        return cls.from_mapping(values)

    def with_overrides(self, pairs: list[str]) -> "SweepConfig":
        """Apply ``key=value`` strings; values use the same syntax as the file."""
        values = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            try:
                values[key.strip()] = tomllib.loads(f"v = {raw.strip()}")["v"]
            except tomllib.TOMLDecodeError:
                values[key.strip()] = raw.strip()
        merged = asdict(self)
        merged.update(values)
        return SweepConfig.from_mapping(merged)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{f.name} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    # -- derived specs ------------------------------------------------------

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(epsilon=self.epsilon, alpha=self.alpha)

    def build_data(self) -> DataSplit:
        if self.dataset == "spirals":
            ds = gen_spirals(self.num_classes, self.samples_per_class, self.noise, self.turns, self.data_seed)
        elif self.dataset == "blobs":
            ds = gen_gaussian_blobs(self.num_classes, self.samples_per_class, self.dim, self.spread, self.data_seed)
        else:
            ds = load_idx_subset(self.idx_images, self.idx_labels, self.max_per_class, self.data_seed)
        return split_dataset(ds, self.split_seed, self.test_fraction)

    def model_config(self, input_dim: int, output_dim: int, load_value=None) -> ModelConfig:
        depth, width_scale = self.depth, self.width_scale
        if load_value is not None and self.load_knob == "depth":
            depth = int(load_value)
        if load_value is not None and self.load_knob == "width_scale":
            width_scale = float(load_value)
        return ModelConfig(input_dim, output_dim, depth, width_scale, self.base_width)

    def train_spec(self, seed: int, temperature_value=None) -> TrainSpec:
        spec = TrainSpec(
            self.epochs,
            self.batch_size,
            SgdConfig.proportional(self.epochs, lr0=self.lr0, momentum=self.momentum,
                                   weight_decay=self.weight_decay,
                                   lr_decay_factor=self.lr_decay_factor),
            None,
            seed,
        ).with_rho(self.rho if self.rho > 0 else None)
        if temperature_value is None:
            return spec
        if self.temperature_knob == "epochs":
            return spec.with_epochs(int(temperature_value))
        if self.temperature_knob == "batch_size":
            return spec.with_batch_size(int(temperature_value))
        return spec.with_rho(float(temperature_value))

    def prune_spec(self, load_value=None) -> PruneSpec:
        density = self.target_density
        if load_value is not None and self.load_knob == "density":
            density = float(load_value)
        return PruneSpec(self.prune_strategy, density, self.exclude_output_layer)

    def twin_spec(self, seed: int) -> TwinSpec:
        """Full twin retraining: ``retrain_epochs`` at ``retrain_lr`` with proportional decay.

        Twin seeds are offset by ``1000 * seed`` so every run seed gets its own pair.
        """
        template = TrainSpec(
            self.retrain_epochs,
            self.batch_size,
            SgdConfig.proportional(self.retrain_epochs, lr0=self.retrain_lr, momentum=self.momentum,
                                   weight_decay=self.weight_decay,
                                   lr_decay_factor=self.lr_decay_factor),
        )
        a, b = self.twin_seeds
        return TwinSpec(self.retrain_epochs, (1000 * seed + a, 1000 * seed + b), template)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    return value
