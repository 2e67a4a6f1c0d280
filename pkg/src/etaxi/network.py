"""Road graph, time-dependent speed network and charging-station lookup.

Junction ids are integers.  Every tie in this module (nearest junction,
equal-length routes, equidistant stations) is broken toward the smaller id so
that repeated runs route identically.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088
HOURS = 24
DEFAULT_SPEED_KMH = 25.0
SPEED_CAP_KMH = 110.0
# equal-length comparisons on float path sums
_DIST_TOL = 1e-9


class NoPathError(Exception):
    """Raised when two junctions are not connected in the road graph."""


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; broadcasts over numpy arrays."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class Junction:
    id: int
    lat: float
    lon: float


@dataclass(frozen=True)
class Segment:
    src: int
    dst: int
    km: float


@dataclass(frozen=True)
class Route:
    nodes: tuple[int, ...]
    edges: tuple[int, ...]
    km: float


class RoadGraph:
    """Directed junction graph with deterministic shortest paths."""

    def __init__(self, junctions: Iterable[Junction], segments: Iterable[Segment]):
        self.junctions: dict[int, Junction] = {}
        for jn in junctions:
            if jn.id in self.junctions:
                raise ValueError(f"duplicate junction id {jn.id}")
            self.junctions[jn.id] = jn
        if not self.junctions:
            raise ValueError("road graph has no junctions")
        self.ids: list[int] = sorted(self.junctions)
        self.index = {jid: k for k, jid in enumerate(self.ids)}
        self.lat = np.array([self.junctions[j].lat for j in self.ids])
        self.lon = np.array([self.junctions[j].lon for j in self.ids])

        self.segments: list[Segment] = []
        best: dict[tuple[int, int], int] = {}
        for seg in segments:
            if seg.src not in self.junctions or seg.dst not in self.junctions:
                raise ValueError(f"segment {seg.src}->{seg.dst} references unknown junction")
            if not seg.km > 0:
                raise ValueError(f"segment {seg.src}->{seg.dst} has non-positive length")
            self.segments.append(seg)
            k = len(self.segments) - 1
            key = (seg.src, seg.dst)
            # parallel edges: keep the shorter, then the earlier one
            if key not in best or seg.km < self.segments[best[key]].km:
                best[key] = k
        self._out: dict[int, list[tuple[int, float, int]]] = {j: [] for j in self.ids}
        self._in: dict[int, list[tuple[int, float, int]]] = {j: [] for j in self.ids}
        for (u, v), k in sorted(best.items()):
            km = self.segments[k].km
            self._out[u].append((v, km, k))
            self._in[v].append((u, km, k))
        self.edge_km = np.array([s.km for s in self.segments], dtype=float)
        self._from_cache: dict[int, dict[int, float]] = {}
        self._to_cache: dict[int, dict[int, float]] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def neighbors(self, j: int) -> list[int]:
        return [v for v, _, _ in self._out[j]]

    def _dijkstra(self, src: int, adj) -> dict[int, float]:
        dist = {src: 0.0}
        heap = [(0.0, src)]
        done = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            for v, km, _ in adj[u]:
                nd = d + km
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        return dist

    def distances_from(self, src: int) -> dict[int, float]:
        if src not in self._from_cache:
            self._check(src)
            self._from_cache[src] = self._dijkstra(src, self._out)
        return self._from_cache[src]

    def distances_to(self, dst: int) -> dict[int, float]:
        if dst not in self._to_cache:
            self._check(dst)
            self._to_cache[dst] = self._dijkstra(dst, self._in)
        return self._to_cache[dst]

    def distance(self, i: int, j: int) -> float:
        d = self.distances_to(j).get(i)
        if d is None:
            raise NoPathError(f"no path {i} -> {j}")
        return d

    def shortest_path(self, i: int, j: int) -> Route:
        """Distance-minimal route; among equal routes the lexicographically
        smallest junction sequence."""
        to_j = self.distances_to(j)
        if i not in to_j:
            raise NoPathError(f"no path {i} -> {j}")
        nodes = [i]
        edges = []
        u = i
        while u != j:
            for v, km, k in self._out[u]:
                dv = to_j.get(v)
                if dv is not None and abs(km + dv - to_j[u]) <= _DIST_TOL * max(1.0, to_j[u]):
                    nodes.append(v)
                    edges.append(k)
                    u = v
                    break
            else:  # pragma: no cover - unreachable with consistent distances
                raise NoPathError(f"route reconstruction failed {i} -> {j}")
        return Route(tuple(nodes), tuple(edges), float(to_j[i]))

    def _check(self, j: int) -> None:
        if j not in self.junctions:
            raise KeyError(f"unknown junction {j}")

    def nearest_junction(self, lat: float, lon: float) -> tuple[int, float]:
        """Closest junction by great-circle distance (km); ties to smaller id."""
        d = haversine_km(lat, lon, self.lat, self.lon)
        dmin = d.min()
        k = int(np.flatnonzero(d <= dmin + 1e-9)[0])
        return self.ids[k], float(d[k])

    def to_json(self) -> dict:
        return {
            "junctions": [{"id": j.id, "lat": j.lat, "lon": j.lon}
                          for j in (self.junctions[i] for i in self.ids)],
            "edges": [{"from": s.src, "to": s.dst, "km": s.km} for s in self.segments],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RoadGraph":
        return cls(
            [Junction(int(j["id"]), float(j["lat"]), float(j["lon"])) for j in data["junctions"]],
            [Segment(int(e["from"]), int(e["to"]), float(e["km"])) for e in data["edges"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> "RoadGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class TravelEstimate:
    """Driving and idling minutes of one trip.

    ``minutes`` is the whole-minute slot count used by the decision model:
    the total rounded up, and at least 1 between distinct junctions.
    """

    driving_min: float
    idling_min: float
    distance_km: float
    minutes: int

    @property
    def total_min(self) -> float:
        return self.driving_min + self.idling_min


def whole_minutes(total: float, distinct: bool) -> int:
    m = int(math.ceil(total - 1e-9)) if total > 0 else 0
    return max(m, 1) if distinct else m


@dataclass
class SpeedNetwork:
    """Road graph labelled with hourly segment speeds and idling ratios."""

    graph: RoadGraph
    speeds: np.ndarray            # (n_segments, 24) km/h
    observed: np.ndarray          # (n_segments, 24) bool
    idling_median: np.ndarray     # (24,) in [0, 1)
    default_speed: float = DEFAULT_SPEED_KMH
    speed_cap: float = SPEED_CAP_KMH
    _routes: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def uniform(cls, graph: RoadGraph, speed: float = DEFAULT_SPEED_KMH,
                idling: float | Sequence[float] = 0.0) -> "SpeedNetwork":
        n = len(graph.segments)
        return cls(graph,
                   np.full((n, HOURS), float(speed)),
                   np.zeros((n, HOURS), dtype=bool),
                   np.broadcast_to(np.asarray(idling, dtype=float), (HOURS,)).copy(),
                   default_speed=float(speed))

    def route(self, i: int, j: int) -> Route:
        key = (i, j)
        if key not in self._routes:
            self._routes[key] = self.graph.shortest_path(i, j)
        return self._routes[key]

    def driving_minutes(self, route: Route, hour: int) -> float:
        if not route.edges:
            return 0.0
        e = np.asarray(route.edges)
        return float(np.sum(self.graph.edge_km[e] / self.speeds[e, hour % HOURS]) * 60.0)

    def travel_time(self, i: int, j: int, minute_of_day: int) -> TravelEstimate:
        hour = (int(minute_of_day) // 60) % HOURS
        route = self.route(i, j)
        drive = self.driving_minutes(route, hour)
        lam = float(self.idling_median[hour])
        idle = drive * lam / (1.0 - lam)
        return TravelEstimate(drive, idle, route.km, whole_minutes(drive + idle, i != j))

    def mean_speed(self, hour: int) -> float:
        """Length-weighted mean segment speed for one hour."""
        km = self.graph.edge_km
        return float(np.sum(km * self.speeds[:, hour % HOURS]) / np.sum(km))

    def to_json(self) -> dict:
        return {
            "graph": self.graph.to_json(),
            "default_speed_kmh": self.default_speed,
            "speed_cap_kmh": self.speed_cap,
            "segment_speed_kmh": [[round(float(v), 10) for v in row] for row in self.speeds],
            "observed": [[int(v) for v in row] for row in self.observed],
            "idling_ratio_median": [round(float(v), 12) for v in self.idling_median],
        }

    @classmethod
    def from_json(cls, data: dict) -> "SpeedNetwork":
        graph = RoadGraph.from_json(data["graph"])
        n = len(graph.segments)
        speeds = np.asarray(data["segment_speed_kmh"], dtype=float).reshape(n, HOURS)
        observed = np.asarray(data["observed"], dtype=bool).reshape(n, HOURS)
        return cls(graph, speeds, observed, np.asarray(data["idling_ratio_median"], dtype=float),
                   default_speed=float(data["default_speed_kmh"]),
                   speed_cap=float(data["speed_cap_kmh"]))


def label_segment_speeds(trips, graph: RoadGraph, default_speed: float = DEFAULT_SPEED_KMH,
                         speed_cap: float = SPEED_CAP_KMH) -> SpeedNetwork:
    """Label every segment, per pick-up hour, with the fastest trip speed seen on it.

    Each trip contributes its recorded average speed to every segment of its
    shortest path.  Unobserved (segment, hour) cells get ``default_speed``;
    observations are capped at ``speed_cap``.
    """
    n = len(graph.segments)
    best = np.zeros((n, HOURS))
    for trip in trips:
        if trip.origin == trip.dest or trip.duration_min <= 0:
            continue
        route = graph.shortest_path(trip.origin, trip.dest)
        speed = trip.distance_km / (trip.duration_min / 60.0)
        if speed <= 0:
            continue
        h = trip.pickup_time.hour
        e = np.asarray(route.edges)
        best[e, h] = np.maximum(best[e, h], min(speed, speed_cap))
    observed = best > 0
    speeds = np.where(observed, best, default_speed)
    net = SpeedNetwork(graph, speeds, observed, np.zeros(HOURS),
                       default_speed=default_speed, speed_cap=speed_cap)
    return net


def fill_nearest_hour(values: dict[int, float], default: float) -> np.ndarray:
    """Expand sparse per-hour values to 24 hours; empty hours copy the
    circularly nearest populated hour (earlier hour on ties)."""
    out = np.full(HOURS, float(default))
    if not values:
        return out
    have = sorted(values)
    for h in range(HOURS):
        if h in values:
            out[h] = values[h]
            continue
        src = min(have, key=lambda g: (min((h - g) % HOURS, (g - h) % HOURS), (h - g) % HOURS))
        out[h] = values[src]
    return out


def idling_ratios(trips, network: SpeedNetwork) -> list[tuple[int, float]]:
    """(pick-up hour, idling ratio) for every trip with a non-empty route."""
    out = []
    for trip in trips:
        if trip.origin == trip.dest or trip.duration_min <= 0:
            continue
        h = trip.pickup_time.hour
        drive = network.driving_minutes(network.route(trip.origin, trip.dest), h)
        total = float(trip.duration_min)
        out.append((h, max(0.0, (total - drive) / total)))
    return out


def idling_ratio_stats(trips, network: SpeedNetwork) -> np.ndarray:
    """Per-hour median idling ratio; also stored on ``network``."""
    by_hour: dict[int, list[float]] = {}
    for h, lam in idling_ratios(trips, network):
        by_hour.setdefault(h, []).append(lam)
    med = {h: float(np.median(v)) for h, v in by_hour.items()}
    out = fill_nearest_hour(med, 0.0)
    network.idling_median = out
    return out


# charging stations ---------------------------------------------------------

MODE3 = "Mode3"
FAST_DC = "FastDC"


@dataclass(frozen=True)
class ChargingStation:
    id: str
    junction: int
    modes: frozenset = frozenset({MODE3})


def load_stations(path: str | Path, graph: RoadGraph,
                  max_snap_km: float | None = None) -> list[ChargingStation]:
    """Read ``id, lat, lon, modes`` CSV; modes separated by ``|`` or ``;``."""
    stations = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            jid, d = graph.nearest_junction(float(row["lat"]), float(row["lon"]))
            if max_snap_km is not None and d > max_snap_km:
                continue
            raw = (row.get("modes") or MODE3).replace(";", "|")
            modes = frozenset(m.strip() for m in raw.split("|") if m.strip())
            stations.append(ChargingStation(row["id"].strip(), jid, modes))
    return stations


@dataclass(frozen=True)
class StationTable:
    """Nearest station ``r(i)`` and its route distance for every junction."""

    station: dict[int, str | None]
    junction: dict[int, int | None]
    km: dict[int, float]

    def reachable(self, i: int) -> bool:
        return self.station.get(i) is not None


def nearest_charging_stations(graph: RoadGraph, stations: Sequence[ChargingStation],
                              mode: str | None = None) -> StationTable:
    if mode is not None:
        stations = [s for s in stations if mode in s.modes]
    if not stations:
        raise ValueError("no charging stations configured")
    ordered = sorted(stations, key=lambda s: s.id)
    best: dict[int, tuple[float, ChargingStation]] = {}
    for st in ordered:
        for i, d in graph.distances_to(st.junction).items():
            cur = best.get(i)
            if cur is None or d < cur[0] - _DIST_TOL:
                best[i] = (d, st)
    station = {i: (best[i][1].id if i in best else None) for i in graph.ids}
    junction = {i: (best[i][1].junction if i in best else None) for i in graph.ids}
    km = {i: (best[i][0] if i in best else math.inf) for i in graph.ids}
    return StationTable(station, junction, km)


def nearest_charging_station(i: int, table: StationTable) -> tuple[str | None, float]:
    return table.station.get(i), table.km.get(i, math.inf)
