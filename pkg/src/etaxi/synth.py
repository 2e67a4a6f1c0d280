"""Synthetic grid city and trip generator used for fixtures and demos."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .ingest import DEFAULT_SCHEMA
from .network import Junction, RoadGraph, Segment

KM_PER_DEG_LAT = 111.32


@dataclass
class CitySpec:
    size: int = 5                      # junctions per side
    spacing_km: float = 1.0
    origin: tuple[float, float] = (40.74, -74.00)
    stations: tuple[int, ...] = (7, 19)    # junction ids
    hot_spots: tuple[tuple[int, float], ...] = ((13, 6.0), (3, 3.0), (21, 3.0))
    n_taxis: int = 60
    day: str = "2013-01-09"
    shift_hours: float = 12.0
    # hourly free-flow speed (km/h) and idling share, one value per hour
    speed_kmh: tuple[float, ...] = (38, 40, 40, 40, 38, 34, 28, 22, 18, 17, 20, 21,
                                    21, 21, 20, 18, 17, 17, 19, 23, 27, 30, 33, 36)
    idling: tuple[float, ...] = (0.30, 0.30, 0.30, 0.33, 0.33, 0.35, 0.40, 0.48, 0.55, 0.56, 0.52, 0.50,
                                 0.50, 0.50, 0.50, 0.52, 0.55, 0.55, 0.52, 0.48, 0.42, 0.38, 0.35, 0.32)
    mean_gap_min: float = 12.0
    detour_share: float = 0.05
    dirty_rows: int = 6
    seed: int = 7
    junction_ids: list = field(default_factory=list, repr=False)


def grid_city(spec: CitySpec) -> RoadGraph:
    """Square grid with two-way streets; ids run 1..size**2 row by row."""
    lat0, lon0 = spec.origin
    dlat = spec.spacing_km / KM_PER_DEG_LAT
    dlon = spec.spacing_km / (KM_PER_DEG_LAT * math.cos(math.radians(lat0)))
    n = spec.size
    junctions = []
    segments = []
    for r in range(n):
        for c in range(n):
            jid = r * n + c + 1
            junctions.append(Junction(jid, round(lat0 + r * dlat, 7), round(lon0 + c * dlon, 7)))
            if c + 1 < n:
                segments += [Segment(jid, jid + 1, spec.spacing_km), Segment(jid + 1, jid, spec.spacing_km)]
            if r + 1 < n:
                segments += [Segment(jid, jid + n, spec.spacing_km), Segment(jid + n, jid, spec.spacing_km)]
    return RoadGraph(junctions, segments)


def _weights(graph: RoadGraph, spec: CitySpec, hour: int) -> np.ndarray:
    w = np.ones(len(graph.ids))
    for n, (jid, amp) in enumerate(spec.hot_spots):
        j = graph.junctions[jid]
        d2 = ((graph.lat - j.lat) * KM_PER_DEG_LAT) ** 2 + ((graph.lon - j.lon) * KM_PER_DEG_LAT * 0.76) ** 2
        # first hot spot peaks mid-day, the others at the rush hours
        phase = 1.0 if n == 0 else (1.0 + math.cos((hour - (8 if n == 1 else 18)) / 24 * 2 * math.pi)) / 2
        w += amp * phase * np.exp(-d2 / (2 * spec.spacing_km ** 2))
    return w / w.sum()


def synth_trips(graph: RoadGraph, spec: CitySpec) -> list[dict]:
    """Trip rows in the documented CSV schema for one service day."""
    rng = np.random.default_rng(spec.seed)
    ids = graph.ids
    edge_factor = rng.uniform(0.85, 1.15, size=len(graph.segments))
    day = datetime.fromisoformat(spec.day)
    dlat = 0.00025
    rows = []
    for taxi in range(spec.n_taxis):
        start_hour = 5 if taxi % 2 == 0 else 17
        t = day + timedelta(hours=start_hour, minutes=int(rng.integers(0, 30)))
        end = day + timedelta(hours=start_hour + spec.shift_hours)
        here = ids[int(rng.integers(len(ids)))]
        while True:
            h = t.hour
            t += timedelta(minutes=float(rng.exponential(spec.mean_gap_min)))
            if t >= end:
                break
            w = _weights(graph, spec, h)
            # pick-ups favour hot spots near the current position
            reach = graph.distances_from(here)
            near = np.exp(-np.array([reach.get(j, 99.0) for j in ids]) / (2 * spec.spacing_km))
            pw = w * near
            o = ids[int(rng.choice(len(ids), p=pw / pw.sum()))]
            d = ids[int(rng.choice(len(ids), p=w))]
            route = graph.shortest_path(o, d)
            hh = t.hour
            drive = sum(graph.segments[e].km / (spec.speed_kmh[hh] * edge_factor[e]) for e in route.edges) * 60
            lam = spec.idling[hh] * rng.uniform(0.8, 1.2)
            minutes = max(1, int(round(drive / (1 - min(lam, 0.9)) + rng.normal(0, 0.5)))) if route.edges \
                else int(rng.integers(2, 6))
            km = route.km + abs(rng.normal(0, 0.04))
            if rng.random() < spec.detour_share:
                km += rng.uniform(0.5, 1.5)
            drop = t + timedelta(minutes=minutes)
            po, pd = graph.junctions[o], graph.junctions[d]
            rows.append({
                "taxi_id": f"T{taxi:04d}",
                "pickup_datetime": t.strftime("%Y-%m-%d %H:%M:%S"),
                "dropoff_datetime": drop.strftime("%Y-%m-%d %H:%M:%S"),
                "trip_distance_km": f"{km:.3f}",
                "pickup_lat": f"{po.lat + rng.uniform(-dlat, dlat):.6f}",
                "pickup_lon": f"{po.lon + rng.uniform(-dlat, dlat):.6f}",
                "dropoff_lat": f"{pd.lat + rng.uniform(-dlat, dlat):.6f}",
                "dropoff_lon": f"{pd.lon + rng.uniform(-dlat, dlat):.6f}",
                "fare_usd": "",
            })
            t, here = drop, d
    for n in range(spec.dirty_rows):
        bad = dict(rows[n])
        if n % 3 == 0:
            bad["trip_distance_km"] = "n/a"
        elif n % 3 == 1:
            bad["dropoff_datetime"] = bad["pickup_datetime"]
        else:
            bad["pickup_lat"] = "10.0"
        rows.append(bad)
    return rows


def stations_rows(graph: RoadGraph, spec: CitySpec) -> list[dict]:
    return [{"id": f"S{n + 1}", "lat": graph.junctions[j].lat, "lon": graph.junctions[j].lon,
             "modes": "Mode3|FastDC"} for n, j in enumerate(spec.stations)]


def write_city(out_dir: str | Path, spec: CitySpec | None = None) -> dict[str, Path]:
    """Write graph.json, stations.csv and trips.csv into ``out_dir``."""
    spec = spec or CitySpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = grid_city(spec)
    paths = {"graph": out / "graph.json", "stations": out / "stations.csv", "trips": out / "trips.csv"}
    paths["graph"].write_text(json.dumps(graph.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(paths["stations"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["id", "lat", "lon", "modes"], lineterminator="\n")
        w.writeheader()
        w.writerows(stations_rows(graph, spec))
    with open(paths["trips"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, list(DEFAULT_SCHEMA.values()), lineterminator="\n")
        w.writeheader()
        w.writerows(synth_trips(graph, spec))
    return paths
