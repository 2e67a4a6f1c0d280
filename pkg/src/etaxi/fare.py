"""NYC metered fares, trip net revenue and action energy cost."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date

import numpy as np

from .energy import ChargingMode, EnergyParams, trip_energy
from .network import SpeedNetwork, StationTable

KM_PER_MILE = 1.609344
GALLON_KWH = 33.7
ELECTRIC = "electric"
ICE = "ice"


@dataclass(frozen=True)
class Tariff:
    initial: float = 2.50
    per_fifth_mile: float = 0.50
    per_slow_minute: float = 0.50
    mta: float = 0.50
    improvement: float = 0.30
    night: float = 0.50           # [20:00, 06:00)
    peak: float = 1.00            # [16:00, 20:00) weekdays, not holidays
    # slow-traffic metering kicks in below 12 mph
    slow_speed_kmh: float = 19.3

    def surcharges(self, clock_minute, weekday: bool = True, holiday: bool = False):
        hour = (np.asarray(clock_minute) // 60) % 24
        out = self.mta + self.improvement + np.where((hour >= 20) | (hour < 6), self.night, 0.0)
        if weekday and not holiday:
            out = out + np.where((hour >= 16) & (hour < 20), self.peak, 0.0)
        return out


@dataclass(frozen=True)
class EnergyPrice:
    electricity: float = 0.20       # USD/kWh
    gasoline: float = 2.50          # USD/gallon
    gallon_kwh: float = GALLON_KWH

    def per_kwh(self, vehicle: str = ELECTRIC) -> float:
        if vehicle == ELECTRIC:
            return self.electricity
        if vehicle == ICE:
            return self.gasoline / self.gallon_kwh
        raise ValueError(f"unknown vehicle type {vehicle!r}")


def metered_fare(fast_km, slow_min, idle_min, clock_minute, tariff: Tariff,
                 weekday: bool = True, holiday: bool = False):
    """Fare from the metered parts of a trip.  Vectorised.

    ``fast_km`` is distance driven at or above the slow-traffic threshold;
    ``slow_min`` is driving time below it and ``idle_min`` is stopped time.
    Distance is metered continuously (no rounding to whole fifths of a mile).
    """
    dist = np.asarray(fast_km) / KM_PER_MILE * 5.0 * tariff.per_fifth_mile
    time = (np.asarray(slow_min) + np.asarray(idle_min)) * tariff.per_slow_minute
    out = tariff.initial + dist + time + tariff.surcharges(clock_minute, weekday, holiday)
    return float(out) if np.ndim(out) == 0 else out


def fare(i: int, j: int, clock_minute: int, network: SpeedNetwork, tariff: Tariff,
         weekday: bool = True, holiday: bool = False) -> float:
    """Metered fare plus surcharges for a trip picked up at ``clock_minute``."""
    hour = (clock_minute // 60) % 24
    route = network.route(i, j)
    est = network.travel_time(i, j, clock_minute)
    fast_km = slow_min = 0.0
    for e in route.edges:
        km = network.graph.edge_km[e]
        v = network.speeds[e, hour]
        if v >= tariff.slow_speed_kmh:
            fast_km += km
        else:
            slow_min += km / v * 60.0
    return metered_fare(fast_km, slow_min, est.idling_min, clock_minute, tariff, weekday, holiday)


def net_revenue(gross_fare: float, energy_kwh: float, price: EnergyPrice,
                vehicle: str = ELECTRIC) -> float:
    return gross_fare - energy_kwh * price.per_kwh(vehicle)


def charging_cost_kwh(to_station_kwh: float, onward_kwh: float, tau_min: float,
                      mode: ChargingMode) -> float:
    """Energy billed for a charging action: both legs plus the purchased charge."""
    return to_station_kwh + onward_kwh + mode.kwh(tau_min)


def action_energy_cost(i: int, j: int, clock_minute: int, tau_min: float, mode: ChargingMode,
                       network: SpeedNetwork, params: EnergyParams, price: EnergyPrice,
                       stations: StationTable | None = None, vehicle: str = ELECTRIC) -> float:
    """Energy cost (USD) of the action i -> j with ``tau_min`` minutes of charging."""
    u = price.per_kwh(vehicle)
    if tau_min <= 0:
        return trip_energy(i, j, clock_minute, params, network) * u
    if stations is None:
        raise ValueError("charging actions need the station table")
    r = stations.junction[i]
    to_r = network.travel_time(i, r, clock_minute)
    e1 = trip_energy(i, r, clock_minute, params, network)
    e2 = trip_energy(r, j, clock_minute + to_r.minutes + int(tau_min), params, network)
    return charging_cost_kwh(e1, e2, tau_min, mode) * u


def is_holiday(day: date | None, holidays: frozenset) -> bool:
    return day is not None and day in holidays


def load_holidays(path) -> frozenset:
    """One ISO date per line; blank lines and ``#`` comments ignored."""
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip().split(",")[0].strip()
            if line and line.lower() != "date":
                out.add(date.fromisoformat(line))
    return frozenset(out)
