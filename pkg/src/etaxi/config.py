"""Run configuration: one YAML file, optional ``--set key=value`` overrides.

Example::

    paths:
      trips: data/trips.csv
      graph: data/graph.json
      stations: data/stations.csv
      holidays: null
      output: out
    ingest: {bbox: [40.45, 41.0, -74.3, -73.65], max_snap_m: 500, discrepancy_km: 0.3}
    network: {default_speed_kmh: 25, speed_cap_kmh: 110}
    estimation: {day_type: weekday, max_gap_min: 120, min_delta_km: 0.5, aggregate_k: 200}
    energy: {vehicle: electric, alpha: [0.1554, -5.4634, 189.297], beta: 1.0,
             aux_load_kw: 1.5, battery_kwh: 30, charge_mode: Mode3, usable: [0.05, 0.95]}
    price: {electricity_usd_kwh: 0.20, gasoline_usd_gal: 2.50}
    tariff: {initial: 2.5, slow_speed_kmh: 19.3}
    solver: {shift: Morning, horizon_min: 720, battery_bin_pct: 1.0, taus: [0, 10, 20, 30, 60],
             strict_paper: false, service_date: "2013-01-09"}
    simulation: {n_taxis: 1, n_rollouts: 1000, seed: 7, capacity: data, emissions: true}
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

DEFAULTS: dict[str, Any] = {
    "paths": {"trips": None, "graph": None, "stations": None, "holidays": None, "output": "out"},
    "ingest": {"bbox": [40.45, 41.0, -74.3, -73.65], "max_snap_m": 500.0, "discrepancy_km": 0.3,
               "schema": None},
    "network": {"default_speed_kmh": 25.0, "speed_cap_kmh": 110.0},
    "estimation": {"day_type": "weekday", "max_gap_min": 120.0, "min_delta_km": 0.5,
                   "default_tau_min": 15.0, "aggregate_k": 200},
    "energy": {"vehicle": "electric", "alpha": [0.1554, -5.4634, 189.297], "beta": 1.0,
               "aux_load_kw": 1.5, "battery_kwh": 30.0, "charge_mode": "Mode3",
               "charge_rate_kw": None, "usable": [0.05, 0.95]},
    "price": {"electricity_usd_kwh": 0.20, "gasoline_usd_gal": 2.50, "gallon_kwh": 33.7},
    "tariff": {"initial": 2.50, "per_fifth_mile": 0.50, "per_slow_minute": 0.50, "mta": 0.50,
               "improvement": 0.30, "night": 0.50, "peak": 1.00, "slow_speed_kmh": 19.3},
    "solver": {"shift": "Morning", "horizon_min": 720, "battery_bin_pct": 1.0,
               "battery_bin_kwh": None, "taus": [0, 10, 20, 30, 60], "full_adjacency": False,
               "strict_paper": False, "service_date": None, "weekday": True,
               "start_junction": None, "start_soc": None},
    "simulation": {"n_taxis": 1, "n_rollouts": 1000, "seed": 7, "capacity": "data",
                   "emissions": True, "gas_prices": [2.5, 3.5, 4.5]},
    "logging": {"level": "INFO"},
}


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 2)."""


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in (extra or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def path(self, name: str) -> Path | None:
        raw = self.data["paths"].get(name)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output(self) -> Path:
        return self.path("output")

    def hash(self) -> str:
        """Digest of the settings that shape results (paths excluded)."""
        blob = {k: v for k, v in self.data.items() if k not in ("paths", "logging")}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        base = p.resolve().parent
    data = _merge(DEFAULTS, raw)
    for item in overrides or []:
        keys, val = _parse_override(item)
        node = data
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config section {'.'.join(keys[:-1])}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)}")
        node[keys[-1]] = val
    _validate(data)
    return RunConfig(data, base)


def _validate(d: dict) -> None:
    if d["solver"]["shift"] not in ("Morning", "Evening"):
        raise ConfigError("solver.shift must be Morning or Evening")
    if d["energy"]["vehicle"] not in ("electric", "ice"):
        raise ConfigError("energy.vehicle must be electric or ice")
    if d["energy"]["charge_mode"] not in ("Mode3", "FastDC"):
        raise ConfigError("energy.charge_mode must be Mode3 or FastDC")
    if int(d["solver"]["horizon_min"]) < 0:
        raise ConfigError("solver.horizon_min must be >= 0")
    taus = list(d["solver"]["taus"])
    if not taus or taus[0] != 0 or taus != sorted(set(taus)):
        raise ConfigError("solver.taus must be ascending, unique and start with 0")
    if int(d["simulation"]["n_taxis"]) < 1:
        raise ConfigError("simulation.n_taxis must be >= 1")
    if d["estimation"]["day_type"] not in ("weekday", "weekend"):
        raise ConfigError("estimation.day_type must be weekday or weekend")
