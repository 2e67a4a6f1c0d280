"""Demand estimation: pick-up probability, destination distribution,
inter-pick-up duration and reachable distance."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .ingest import SnappedTrip
from .network import HOURS, RoadGraph, SpeedNetwork, fill_nearest_hour, haversine_km

WEEKDAY = "weekday"
WEEKEND = "weekend"
MAX_GAP_MIN = 120.0
MIN_DELTA_KM = 0.5
DEFAULT_TAU_MIN = 15.0
DAY_MIN = 1440


def day_type(when) -> str:
    return WEEKEND if when.weekday() >= 5 else WEEKDAY


def ratio(n_pickup: float, n_competitor: float) -> float:
    """Count ratio of the pick-up probability; 0 when nothing was observed."""
    total = n_pickup + n_competitor
    return n_pickup / total if total > 0 else 0.0


def _minute_of_day(t) -> int:
    return t.hour * 60 + t.minute


def _in_window(minutes: np.ndarray, start: float, length: float) -> np.ndarray:
    return np.mod(minutes - start, DAY_MIN) < length


def pickup_probability(i: int, minute: float, trips: Sequence[SnappedTrip], tau: float,
                       delta: float, graph: RoadGraph) -> float:
    """Count-ratio pick-up probability at junction ``i`` for one window.

    Pick-ups at ``i`` in [minute, minute + tau) against drop-offs within
    ``delta`` km (great circle) of ``i`` in [minute - tau, minute + tau).
    Times are minute-of-day, pooled over dates.
    """
    lat, lon = graph.junctions[i].lat, graph.junctions[i].lon
    n_p = n_d = 0
    for trip in trips:
        if trip.origin == i and (_minute_of_day(trip.pickup_time) - minute) % DAY_MIN < tau:
            n_p += 1
        if (_minute_of_day(trip.dropoff_time) - minute + tau) % DAY_MIN < 2 * tau:
            dj = graph.junctions[trip.dest]
            if haversine_km(lat, lon, dj.lat, dj.lon) <= delta:
                n_d += 1
    return ratio(n_p, n_d)


def destination_probability(i: int, j: int, hour: int, trips: Iterable[SnappedTrip]) -> float | None:
    """Share of hour-``hour`` pick-ups at ``i`` that went to ``j``; None if
    there were no pick-ups (an empty row)."""
    n_p = n_d = 0
    for trip in trips:
        if trip.origin == i and trip.pickup_time.hour == hour:
            n_p += 1
            n_d += trip.dest == j
    return n_d / n_p if n_p else None


def inter_pickup_gaps(trips: Iterable[SnappedTrip], kind: str | None = None,
                      max_gap: float = MAX_GAP_MIN) -> dict[int, list[float]]:
    """Drop-off to next pick-up gaps per taxi, keyed by the hour the gap starts."""
    by_taxi: dict[str, list[SnappedTrip]] = defaultdict(list)
    for t in trips:
        by_taxi[t.taxi_id].append(t)
    gaps: dict[int, list[float]] = defaultdict(list)
    for taxi in sorted(by_taxi):
        seq = sorted(by_taxi[taxi], key=lambda t: (t.pickup_time, t.dropoff_time))
        for a, b in zip(seq, seq[1:]):
            if kind is not None and day_type(a.dropoff_time) != kind:
                continue
            gap = (b.pickup_time - a.dropoff_time).total_seconds() / 60.0
            if 0 <= gap <= max_gap:
                gaps[a.dropoff_time.hour].append(gap)
    return gaps


def inter_pickup_duration(trips: Iterable[SnappedTrip], kind: str = WEEKDAY,
                          max_gap: float = MAX_GAP_MIN,
                          default: float = DEFAULT_TAU_MIN) -> np.ndarray:
    """Per-hour mean inter-pick-up duration (minutes) for one day type."""
    gaps = inter_pickup_gaps(trips, kind, max_gap)
    means = {h: float(np.mean(v)) for h, v in gaps.items() if v}
    tau = fill_nearest_hour(means, default)
    return np.maximum(tau, 1.0)


def reachable_distance(network: SpeedNetwork, tau: Sequence[float],
                       min_km: float = MIN_DELTA_KM) -> np.ndarray:
    return np.array([max(min_km, network.mean_speed(h) * float(tau[h]) / 60.0)
                     for h in range(HOURS)])


@dataclass
class DemandModel:
    """Hourly demand tables over a fixed junction set.

    ``pickup_rate`` and ``competitor_rate`` are mean counts per
    inter-pick-up window; ``pickup_prob`` is their ratio.
    """

    junctions: list[int]
    tau: np.ndarray                     # (24,) minutes
    delta: np.ndarray                   # (24,) km
    pickup_rate: np.ndarray             # (24, K)
    competitor_rate: np.ndarray         # (24, K)
    dest_counts: dict = field(default_factory=dict)   # (hour, i) -> Counter{j: n}
    day_type: str = WEEKDAY
    n_days: int = 1

    def __post_init__(self):
        self.index = {j: k for k, j in enumerate(self.junctions)}

    @property
    def pickup_prob(self) -> np.ndarray:
        tot = self.pickup_rate + self.competitor_rate
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.pickup_rate / np.where(tot > 0, tot, 1.0), 0.0)

    def pickup(self, hour: int, i: int) -> float:
        k = self.index.get(i)
        return 0.0 if k is None else float(self.pickup_prob[hour % HOURS, k])

    def dest_row(self, hour: int, i: int) -> dict[int, float]:
        """Destination distribution; empty dict signals no demand."""
        row = self.dest_counts.get((hour % HOURS, i))
        if not row:
            return {}
        n = sum(row.values())
        return {j: row[j] / n for j in sorted(row)}

    def dest(self, hour: int, i: int, j: int) -> float:
        return self.dest_row(hour, i).get(j, 0.0)

    def total_pickups(self) -> dict[int, int]:
        tot: Counter = Counter()
        for (_, i), row in self.dest_counts.items():
            tot[i] += sum(row.values())
        return dict(tot)

    def to_json(self) -> dict:
        pp = self.pickup_prob
        return {
            "junctions": list(self.junctions),
            "day_type": self.day_type,
            "n_days": self.n_days,
            "tau_min": [float(v) for v in self.tau],
            "delta_km": [float(v) for v in self.delta],
            "pickup_prob": {str(h): {str(j): float(pp[h, k]) for k, j in enumerate(self.junctions)}
                            for h in range(HOURS)},
            "pickup_rate": [[float(v) for v in row] for row in self.pickup_rate],
            "competitor_rate": [[float(v) for v in row] for row in self.competitor_rate],
            "dest_counts": [[h, i, j, int(n)] for (h, i) in sorted(self.dest_counts)
                            for j, n in sorted(self.dest_counts[(h, i)].items())],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DemandModel":
        counts: dict = {}
        for h, i, j, n in data["dest_counts"]:
            counts.setdefault((int(h), int(i)), Counter())[int(j)] = int(n)
        return cls([int(j) for j in data["junctions"]],
                   np.asarray(data["tau_min"], dtype=float),
                   np.asarray(data["delta_km"], dtype=float),
                   np.asarray(data["pickup_rate"], dtype=float),
                   np.asarray(data["competitor_rate"], dtype=float),
                   counts, data["day_type"], int(data["n_days"]))


def estimate_demand(trips: Sequence[SnappedTrip], network: SpeedNetwork,
                    kind: str = WEEKDAY, junctions: Sequence[int] | None = None,
                    max_gap: float = MAX_GAP_MIN, min_delta_km: float = MIN_DELTA_KM,
                    default_tau: float = DEFAULT_TAU_MIN) -> DemandModel:
    """Fold trips into hourly demand tables.

    Each hour is tiled with windows of that hour's tau; pick-up and competing
    drop-off counts are summed over the windows and dates, then averaged per
    window so the ratio matches the single-window estimate when one window
    is used.
    """
    graph = network.graph
    if junctions is None:
        junctions = sorted({t.origin for t in trips} | {t.dest for t in trips})
    junctions = list(junctions)
    index = {j: k for k, j in enumerate(junctions)}
    K = len(junctions)
    lat = np.array([graph.junctions[j].lat for j in junctions])
    lon = np.array([graph.junctions[j].lon for j in junctions])
    gc = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])

    tau = inter_pickup_duration(trips, kind, max_gap, default_tau)
    if not inter_pickup_gaps(trips, kind, max_gap):
        other = WEEKEND if kind == WEEKDAY else WEEKDAY
        tau = inter_pickup_duration(trips, other, max_gap, default_tau)
    delta = reachable_distance(network, tau, min_delta_km)

    pick = [t for t in trips if t.origin in index]
    drop = [t for t in trips if t.dest in index]
    pm = np.array([_minute_of_day(t.pickup_time) for t in pick], dtype=float)
    pj = np.array([index[t.origin] for t in pick], dtype=int)
    dm = np.array([_minute_of_day(t.dropoff_time) for t in drop], dtype=float)
    dj = np.array([index[t.dest] for t in drop], dtype=int)
    n_days = max(1, len({t.pickup_time.date() for t in trips}))

    rate_p = np.zeros((HOURS, K))
    rate_d = np.zeros((HOURS, K))
    for h in range(HOURS):
        w = float(tau[h])
        near = (gc <= delta[h]).astype(float)
        starts = np.arange(h * 60.0, (h + 1) * 60.0, w)
        for s in starts:
            rate_p[h] += np.bincount(pj[_in_window(pm, s, w)], minlength=K)
            cnt = np.bincount(dj[_in_window(dm, s - w, 2 * w)], minlength=K)
            rate_d[h] += near @ cnt
        rate_p[h] /= len(starts) * n_days
        rate_d[h] /= len(starts) * n_days

    counts: dict = {}
    for t in pick:
        if t.dest in index:
            counts.setdefault((t.pickup_time.hour, t.origin), Counter())[t.dest] += 1
    return DemandModel(junctions, tau, delta, rate_p, rate_d, counts, kind, n_days)


def select_centers(trips: Iterable[SnappedTrip], k: int, keep: Iterable[int] = ()) -> list[int]:
    """Top-``k`` junctions by pick-up count (ties to smaller id) plus ``keep``."""
    cnt = Counter(t.origin for t in trips)
    top = sorted(cnt, key=lambda j: (-cnt[j], j))[:k]
    return sorted(set(top) | set(keep))


def aggregate_trips(trips: Iterable[SnappedTrip], centers: Sequence[int],
                    graph: RoadGraph) -> list[SnappedTrip]:
    """Move trip endpoints to the great-circle nearest center."""
    centers = sorted(centers)
    clat = np.array([graph.junctions[c].lat for c in centers])
    clon = np.array([graph.junctions[c].lon for c in centers])
    cache: dict[int, int] = {}

    def nearest(j: int) -> int:
        if j not in cache:
            d = haversine_km(graph.junctions[j].lat, graph.junctions[j].lon, clat, clon)
            cache[j] = centers[int(np.argmin(d))]
        return cache[j]

    return [replace(t, origin=nearest(t.origin), dest=nearest(t.dest)) for t in trips]
