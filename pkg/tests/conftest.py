from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from etaxi.energy import Battery, EnergyParams, MODE3
from etaxi.estimation import estimate_demand
from etaxi.fare import EnergyPrice, Tariff
from etaxi.ingest import ingest, parse_trips
from etaxi.mdp import MDPModel, SolverConfig, build_model
from etaxi.network import (Junction, RoadGraph, Segment, idling_ratio_stats, label_segment_speeds,
                           load_stations, nearest_charging_stations)
from etaxi.synth import CitySpec, write_city


def micro_model(seed: int, K: int | None = None, H: int | None = None, NB: int | None = None,
                taus=(0, 15), strict: bool = False, electric: bool = True) -> MDPModel:
    """Random instance with per-minute tables: <= 4 junctions, <= 6 slots, <= 3 bins."""
    rng = np.random.default_rng(seed)
    K = K or int(rng.integers(2, 5))
    H = H if H is not None else int(rng.integers(3, 7))
    NB = NB or (int(rng.integers(1, 4)) if electric else 1)
    P = 7
    move = rng.integers(1, 4, size=(P, K, K))
    for p in range(P):
        np.fill_diagonal(move[p], 0)
    energy = rng.uniform(0.0, 1.6, size=(P, K, K))
    energy[rng.random((P, K, K)) < 0.3] = 0.0
    for p in range(P):
        np.fill_diagonal(energy[p], 0.0)
    pp = rng.uniform(0, 1, size=(P, K))
    pp[rng.random((P, K)) < 0.2] = 0.0
    pd = rng.random((P, K, K)) * (rng.random((P, K, K)) < 0.7)
    for p in range(P):
        for i in range(K):
            if pd[p, i].sum() == 0:
                pd[p, i, rng.integers(K)] = 1.0
    pd /= pd.sum(axis=2, keepdims=True)
    station = rng.integers(0, K, size=K)
    station[rng.integers(K)] = rng.integers(K)
    dist = rng.uniform(0.5, 3.0, size=(K, K))
    np.fill_diagonal(dist, 0.0)
    return MDPModel(
        junctions=np.arange(1, K + 1), horizon=H, n_bins=NB, bin_kwh=1.0, low_kwh=0.5,
        taus=taus if electric else (0,), charge_kw=4.0, unit_price=0.2 if electric else 2.5 / 33.7,
        move_min=move, energy=energy, dist_km=dist,
        gross_fare=rng.uniform(3.0, 15.0, size=(P, K, K)), pickup_prob=pp, dest_prob=pd,
        station=station, start_minute=int(rng.integers(0, P)), period_minutes=1,
        strict=strict, electric=electric)


def line_graph(n: int = 3, km: float = 1.0) -> RoadGraph:
    js = [Junction(i, 40.75, -73.99 + 0.01 * i) for i in range(1, n + 1)]
    segs = []
    for i in range(1, n):
        segs += [Segment(i, i + 1, km), Segment(i + 1, i, km)]
    return RoadGraph(js, segs)


@pytest.fixture(scope="session")
def city(tmp_path_factory):
    """The 25-junction synthetic city run through ingest, network and estimation."""
    out = tmp_path_factory.mktemp("city")
    spec = CitySpec()
    paths = write_city(out, spec)
    graph = RoadGraph.load(paths["graph"])
    with open(paths["trips"], encoding="utf-8") as fh:
        records, report = parse_trips(fh)
    trips, report = ingest(records, graph, report)
    network = label_segment_speeds(trips, graph)
    idling_ratio_stats(trips, network)
    stations = nearest_charging_stations(graph, load_stations(paths["stations"], graph))
    demand = estimate_demand(trips, network)
    return {"paths": paths, "graph": graph, "trips": trips, "report": report, "network": network,
            "stations": stations, "demand": demand, "spec": spec}


def city_model(city, horizon=240, battery_kwh=30.0, mode=MODE3, beta=1.0, vehicle="electric",
               bin_kwh=None, price=None, shift="Morning", **kw):
    cfg = SolverConfig(horizon_min=horizon, shift=shift, battery_bin_kwh=bin_kwh, **kw)
    return build_model(city["network"], city["stations"], city["demand"], EnergyParams(beta=beta),
                       Battery(battery_kwh), mode, Tariff(), price or EnergyPrice(), cfg, vehicle)
