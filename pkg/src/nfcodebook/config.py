"""Experiment configuration files (YAML, flat keys plus named scenarios)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .channel import Scenario, UserArea
from .geometry import ArrayGeometry
from .meta import MetaConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or missing configuration key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


_DEFAULTS: dict[str, Any] = {
    "nx": 11,
    "nz": 11,
    "spacing_m": None,  # half wavelength
    "wavelength_m": 0.01,
    "n_users": 4,
    "n_chains": 4,
    "p_max_dbm": 30.0,
    "noise_dbm": -10.0,
    "seed": 0,
    "output_dir": ".",
    "scenario": None,
    "dataset_size": 512,
    "init": "uniform-random",
    "batch_size": 16,
    "learning_rate": 0.05,
    "epochs": 300,
    "optimizer": "adam",
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "meta_family": None,
    "n_tasks": 64,
    "support_size": 16,
    "query_size": 16,
    "task_batch_size": 4,
    "inner_steps": 5,
    "inner_rate": 0.05,
    "outer_rate": 2.0,
    "meta_epochs": 300,
    "inner_optimizer": "adam",
    "outer_mode": "first-order",
    "eval_size": 200,
    "baseline_angles": None,
    "baseline_distances": None,
    "baseline_distance_range": [0.1, 1.0],
    "baseline_sector_deg": [-60.0, 60.0],
    "max_condition": 1e12,
}


def _parse_area(name: str, i: int, raw) -> tuple[UserArea, float]:
    key = f"scenarios.{name}.areas[{i}]"
    if isinstance(raw, dict):
        try:
            az = raw["azimuth_deg"]
            dist = raw["distance_m"]
        except KeyError as exc:
            raise ConfigError(key, f"missing {exc.args[0]}") from None
        weight = raw.get("weight", 1.0)
        elev = raw.get("elevation_deg", 0.0)
    elif isinstance(raw, (list, tuple)) and len(raw) in (4, 5):
        az, dist = raw[0:2], raw[2:4]
        weight = raw[4] if len(raw) == 5 else 1.0
        elev = 0.0
    else:
        raise ConfigError(key, "expected [az_min_deg, az_max_deg, r_min_m, r_max_m(, weight)] or a mapping")
    try:
        return UserArea.from_degrees(az[0], az[1], dist[0], dist[1], elev), float(weight)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(key, str(exc)) from None


def _parse_scenario(name: str, raw: dict, n_users: int) -> Scenario:
    if not isinstance(raw, dict) or "areas" not in raw:
        raise ConfigError(f"scenarios.{name}", "needs an 'areas' list")
    parsed = [_parse_area(name, i, a) for i, a in enumerate(raw["areas"])]
    try:
        return Scenario(
            areas=tuple(a for a, _ in parsed),
            n_users=int(raw.get("n_users", n_users)),
            weights=tuple(w for _, w in parsed),
            n_scatterers=int(raw.get("n_scatterers", 0)),
            scatterer_loss=float(raw.get("scatterer_loss", 1.0)),
            name=name,
        )
    except ValueError as exc:
        raise ConfigError(f"scenarios.{name}", str(exc)) from None


@dataclass
class RunConfig:
    values: dict[str, Any]
    scenarios: dict[str, Scenario] = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    @property
    def geometry(self) -> ArrayGeometry:
        wl = float(self["wavelength_m"])
        spacing = self["spacing_m"]
        try:
            return ArrayGeometry(int(self["nx"]), int(self["nz"]),
                                 wl / 2 if spacing is None else float(spacing), wl)
        except ValueError as exc:
            raise ConfigError("nx/nz/spacing_m/wavelength_m", str(exc)) from None

    @property
    def p_max(self) -> float:
        return dbm_to_watts(float(self["p_max_dbm"]))

    @property
    def noise_power(self) -> float:
        return dbm_to_watts(float(self["noise_dbm"]))

    @property
    def n_chains(self) -> int:
        return int(self["n_chains"])

    def scenario(self, name: str | None = None) -> Scenario:
        name = name or self["scenario"] or (next(iter(self.scenarios)) if self.scenarios else None)
        if name is None:
            raise ConfigError("scenarios", "no scenario defined")
        if name not in self.scenarios:
            raise ConfigError("scenario", f"unknown scenario {name!r}; defined: {sorted(self.scenarios)}")
        return self.scenarios[name]

    def meta_family(self) -> list[Scenario]:
        names = self["meta_family"]
        if not names:
            raise ConfigError("meta_family", "meta-training needs a list of scenario names")
        return [self.scenario(n) for n in names]

    def train_config(self, seed: int) -> TrainConfig:
        return _build(TrainConfig, "train", batch_size=int(self["batch_size"]),
                      learning_rate=float(self["learning_rate"]), epochs=int(self["epochs"]),
                      optimizer=self["optimizer"], beta1=float(self["adam_beta1"]),
                      beta2=float(self["adam_beta2"]), eps=float(self["adam_eps"]), seed=seed)

    def meta_config(self, seed: int) -> MetaConfig:
        return _build(MetaConfig, "meta", task_batch_size=int(self["task_batch_size"]),
                      inner_steps=int(self["inner_steps"]), inner_rate=float(self["inner_rate"]),
                      outer_rate=float(self["outer_rate"]), epochs=int(self["meta_epochs"]),
                      inner_optimizer=self["inner_optimizer"], outer_mode=self["outer_mode"],
                      seed=seed)

    def baseline_grid(self) -> dict:
        n = self.geometry.n_elements
        angles, dists = self["baseline_angles"], self["baseline_distances"]
        if angles is None and dists is None:
            side = int(round(np.sqrt(n)))
            if side * side != n:
                raise ConfigError("baseline_angles", "set baseline_angles/baseline_distances for non-square N")
            angles = dists = side
        elif angles is None:
            angles = n // int(dists)
        elif dists is None:
            dists = n // int(angles)
        sector = [np.deg2rad(float(x)) for x in self["baseline_sector_deg"]]
        return dict(angle_count=int(angles), distance_count=int(dists),
                    distance_range=tuple(float(x) for x in self["baseline_distance_range"]),
                    sector=tuple(sector))


def _build(cls, section, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def parse_config(data: dict | None, source: Path | None = None) -> RunConfig:
    data = dict(data or {})
    raw_scenarios = data.pop("scenarios", {}) or {}
    unknown = sorted(set(data) - set(_DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    values = {**_DEFAULTS, **data}
    cfg = RunConfig(values, {}, source)
    if not isinstance(raw_scenarios, dict):
        raise ConfigError("scenarios", "expected a mapping of name -> scenario")
    cfg.scenarios = {
        str(name): _parse_scenario(str(name), raw, int(values["n_users"]))
        for name, raw in raw_scenarios.items()
    }
    cfg.geometry  # validate early
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping of keys to values")
    return parse_config(data, path)
