"""Trip energy, reserve energy and battery bookkeeping (kWh throughout)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import NoPathError, SpeedNetwork, StationTable

# Nissan Leaf speed curve, Wh/km as a quadratic in km/h
ALPHA = (0.1554, -5.4634, 189.297)
BETA_CLASSES = {"mild": 0.8, "normal": 1.0, "aggressive": 1.2}

MODE3_KW = 6.6
FAST_DC_KW = 50.0


@dataclass(frozen=True)
class EnergyParams:
    alpha1: float = ALPHA[0]
    alpha2: float = ALPHA[1]
    alpha3: float = ALPHA[2]
    beta: float = 1.0
    aux_load_kw: float = 1.5

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.aux_load_kw < 0:
            raise ValueError("auxiliary load must be non-negative")


@dataclass(frozen=True)
class ChargingMode:
    mode: str
    rate_kw: float

    def __post_init__(self):
        if not self.rate_kw > 0:
            raise ValueError("charging rate must be positive")

    def kwh(self, minutes: float) -> float:
        return minutes / 60.0 * self.rate_kw


MODE3 = ChargingMode("Mode3", MODE3_KW)
FAST_DC = ChargingMode("FastDC", FAST_DC_KW)


@dataclass(frozen=True)
class Battery:
    capacity_kwh: float
    low_frac: float = 0.05
    high_frac: float = 0.95

    @property
    def low(self) -> float:
        return self.low_frac * self.capacity_kwh

    @property
    def high(self) -> float:
        return self.high_frac * self.capacity_kwh


def wh_per_km(v, params: EnergyParams):
    """Moving consumption per km at speed ``v``, clamped at zero before beta."""
    q = params.alpha1 * np.square(v) + params.alpha2 * v + params.alpha3
    return params.beta * np.maximum(q, 0.0)


def energy_kwh(distance_km, driving_min, total_min, params: EnergyParams):
    """Moving plus auxiliary energy; speed is distance over driving time.

    Vectorised; zero distance yields zero moving energy.
    """
    distance_km = np.asarray(distance_km, dtype=float)
    driving_min = np.asarray(driving_min, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(driving_min > 0, distance_km / (driving_min / 60.0), 0.0)
    moving = np.where(distance_km > 0, wh_per_km(v, params) * distance_km / 1000.0, 0.0)
    aux = params.aux_load_kw * np.asarray(total_min, dtype=float) / 60.0
    out = moving + aux
    return float(out) if out.ndim == 0 else out


def trip_energy(i: int, j: int, minute_of_day: int, params: EnergyParams,
                network: SpeedNetwork) -> float:
    """Energy (kWh) to drive the shortest path i -> j departing at ``minute_of_day``."""
    est = network.travel_time(i, j, minute_of_day)
    return energy_kwh(est.distance_km, est.driving_min, est.minutes, params)


def reserve_energy(i: int, minute_of_day: int, params: EnergyParams, network: SpeedNetwork,
                   stations: StationTable) -> float:
    """Energy to reach the nearest charging station; inf if none is reachable."""
    r = stations.junction.get(i)
    if r is None:
        return math.inf
    try:
        return trip_energy(i, r, minute_of_day, params, network)
    except NoPathError:
        return math.inf


def apply_charge(soc: float, tau_min: float, mode: ChargingMode, battery: Battery) -> float:
    if tau_min < 0:
        raise ValueError("charging duration must be non-negative")
    return min(soc + mode.kwh(tau_min), battery.high)


class InfeasibleAction(ValueError):
    """The action would take the battery below its floor."""


def battery_transition(soc: float, tau_min: float, leg_kwh: float, battery: Battery,
                       mode: ChargingMode | None = None, to_station_kwh: float = 0.0) -> float:
    """Battery on arrival at the action's target.

    Without charging, ``leg_kwh`` is the energy i -> j.  With charging, the
    taxi first spends ``to_station_kwh`` reaching r(i), charges for
    ``tau_min`` (capped at the usable maximum) and then spends ``leg_kwh``
    on r(i) -> j.
    """
    if tau_min > 0:
        if mode is None:
            raise ValueError("charging action needs a charging mode")
        at_station = soc - to_station_kwh
        if at_station < battery.low - 1e-12:
            raise InfeasibleAction("cannot reach the charging station")
        soc = apply_charge(at_station, tau_min, mode, battery)
    out = soc - leg_kwh
    if out < battery.low - 1e-12:
        raise InfeasibleAction(f"battery would drop to {out:.3f} kWh")
    return out
