"""Experiment configuration: a YAML file layered over documented defaults."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .field import GridField, QuantileSet, SensorModel, generate_synthetic, load_raster
from .gp import GPHyperparams
from .mission import TeamConfig
from .network import NetworkConfig
from .objective import ObjectiveConfig
from .utility import DecisionPolicy, UtilityMethod

SCHEMA = """\
# quantcomm configuration. Every key is optional; omitted keys take these values.
field:
  source: synthetic        # synthetic | raster
  kind: smoothed_noise     # synthetic only: smoothed_noise | gaussian_blobs
  width: 25
  height: 25
  path: null               # raster only: CSV matrix or P2/P5 PGM
  normalize: true          # raster only: min-max scale to [0, 1]
  cell_size_m: [3.2, 2.4]  # meters per cell along x, y (80 x 60 m over 25 x 25)
  seed_offset: 0           # synthetic field seed = run seed + seed_offset
team:
  n_robots: 4
  budget: 10               # planning steps per robot
  spread: 0.2              # starts drawn in the centered spread-fraction subrectangle
network:
  dropoff: 0.4             # sigmoid dropoff rate
  radius: 15.0             # communication / sensing radius
  oracle_handshake: false
  units: meters            # meters | cells
sensor:
  patch_side: 5
  noise_std: 0.05
gp:
  length_scale_cells: 3.0
  signal_variance: 1.0
  noise_variance: 0.0025
  jitter: 1.0e-8
  prior_mean: 0.5
objective:
  variance_weight: 1.0e-4  # weight on summed posterior variance
  random_tiebreak: false
thresholds:                # utility thresholds; Reward and Action share `reward`
  reward: 2.8e-4
  ego: 8.3e-5
experiment:
  methods: [action, always, ego_reward, never, reward]
  quantile_sets:
    quartiles: [0.25, 0.5, 0.75]
    median_extrema: [0.5, 0.9, 0.99]
    extrema: [0.9, 0.95, 0.99]
  seeds: 5                 # number of seeds per (method, quantile set)
  seed_start: 0
  handshake_modes: [false] # [false, true] runs every cell with and without the oracle handshake
  workers: 1
  output_dir: out
calibration:
  percentile: 0.25
  seeds: 5
  seed_start: 10000        # kept apart from evaluation seeds
"""

DEFAULTS: dict[str, Any] = yaml.safe_load(SCHEMA)

PRESETS = {
    # 4 methods x 3 quantile sets x 5 seeds = 60 instances
    "compact": {"experiment": {"methods": ["action", "always", "ego_reward", "reward"], "seeds": 5}},
    "full": {},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and key != "quantile_sets":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, override: dict | None = None, preset: str | None = None) -> "ExperimentConfig":
        raw = DEFAULTS
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            raw = _merge(raw, PRESETS[preset])
        cfg = cls(_merge(raw, override or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, preset: str | None = None) -> "ExperimentConfig":
        override = {}
        if path is not None:
            with open(path) as fh:
                override = yaml.safe_load(fh) or {}
            if not isinstance(override, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(override, preset)

    def updated(self, override: dict) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.raw, override))

    def validate(self) -> None:
        exp = self.raw["experiment"]
        if not exp["methods"]:
            raise ConfigError("experiment.methods must be nonempty")
        for m in exp["methods"]:
            UtilityMethod(m)
        if not exp["quantile_sets"]:
            raise ConfigError("experiment.quantile_sets must be nonempty")
        self.quantile_sets()
        if int(exp["seeds"]) < 1:
            raise ConfigError("experiment.seeds must be >= 1")
        if self.raw["field"]["source"] not in ("synthetic", "raster"):
            raise ConfigError("field.source must be 'synthetic' or 'raster'")

    # --- typed views -------------------------------------------------------

    @property
    def methods(self) -> list[UtilityMethod]:
        return [UtilityMethod(m) for m in self.raw["experiment"]["methods"]]

    def quantile_sets(self) -> dict[str, QuantileSet]:
        return {name: QuantileSet(tuple(qs)) for name, qs in self.raw["experiment"]["quantile_sets"].items()}

    @property
    def seeds(self) -> list[int]:
        exp = self.raw["experiment"]
        return list(range(int(exp["seed_start"]), int(exp["seed_start"]) + int(exp["seeds"])))

    @property
    def calibration_seeds(self) -> list[int]:
        cal = self.raw["calibration"]
        return list(range(int(cal["seed_start"]), int(cal["seed_start"]) + int(cal["seeds"])))

    @property
    def handshake_modes(self) -> list[bool]:
        return [bool(v) for v in self.raw["experiment"]["handshake_modes"]]

    @property
    def workers(self) -> int:
        return int(self.raw["experiment"]["workers"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["experiment"]["output_dir"])

    @property
    def thresholds(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.raw["thresholds"].items()}

    def build_field(self, seed: int) -> GridField:
        f = self.raw["field"]
        cs = tuple(f["cell_size_m"]) if isinstance(f["cell_size_m"], (list, tuple)) else f["cell_size_m"]
        if f["source"] == "raster":
            if not f["path"]:
                raise ConfigError("field.path is required for raster fields")
            return load_raster(f["path"], bool(f["normalize"]), cs)
        return generate_synthetic(f["kind"], int(f["width"]), int(f["height"]),
                                  seed + int(f["seed_offset"]), cs)

    def team_config(self, method, quantiles: QuantileSet, seed: int, oracle_handshake: bool | None = None,
                    thresholds: dict | None = None, probe_methods=()) -> TeamConfig:
        r = self.raw
        net = dict(r["network"])
        if oracle_handshake is not None:
            net["oracle_handshake"] = bool(oracle_handshake)
        return TeamConfig(
            n_robots=int(r["team"]["n_robots"]),
            budget=int(r["team"]["budget"]),
            spread=float(r["team"]["spread"]),
            policy=DecisionPolicy.for_method(method, thresholds or self.thresholds),
            network=NetworkConfig(float(net["dropoff"]), float(net["radius"]),
                                  bool(net["oracle_handshake"]), net["units"]),
            objective=ObjectiveConfig(quantiles, float(r["objective"]["variance_weight"]),
                                      bool(r["objective"]["random_tiebreak"])),
            sensor=SensorModel(int(r["sensor"]["patch_side"]), float(r["sensor"]["noise_std"])),
            gp=GPHyperparams(**{k: float(v) for k, v in r["gp"].items()}),
            seed=seed,
            probe_methods=tuple(probe_methods),
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)
