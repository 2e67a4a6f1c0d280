"""Pipeline stages behind the command line.

Each stage reads the artifacts of the stages before it from the output
directory, checks the hashes they carry, and writes its own artifacts with
fresh hashes.  Stages return a short summary dict for the caller to print.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from datetime import date
from pathlib import Path

import numpy as np

from . import plotting
from .artifacts import (ArtifactError, check_inputs, file_hash, read_json, read_meta, read_policy,
                        rows_to_csv, write_json, write_policy, write_values)
from .config import ConfigError, RunConfig
from .energy import FAST_DC, MODE3, Battery, ChargingMode, EnergyParams
from .estimation import aggregate_trips, estimate_demand, select_centers, DemandModel
from .fare import ICE, EnergyPrice, Tariff, is_holiday, load_holidays
from .ingest import SHIFT_START_HOUR, assign_shift, ingest, parse_trips, read_store, write_store
from .mdp import (DeadStateError, MDPModel, Policy, SolverConfig, build_model,
                  solve_backward)
from .network import (RoadGraph, SpeedNetwork, StationTable, idling_ratio_stats, label_segment_speeds,
                      load_stations, nearest_charging_stations)
from .sim import (StartState, emission_report, gas_price_sensitivity, junction_capacity_from_data,
                  replay_recorded_shifts, rollout_fleet, rollout_many, summarize)

log = logging.getLogger("etaxi")

TRIPS = "trips_snapped.csv"
INGEST_REPORT = "ingest_report.json"
NETWORK = "speed_network.json"
STATIONS = "stations.json"
DEMAND = "demand_model.json"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def section_hash(cfg: RunConfig, *sections: str) -> str:
    return _digest({s: cfg[s] for s in sections})


def model_hash(model: MDPModel) -> str:
    h = hashlib.sha256()
    for arr in (model.junctions, model.move_min, model.energy, model.dist_km, model.gross_fare,
                model.pickup_prob, model.dest_prob, model.station, model.roam_mask, model.energy_bins):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([model.horizon, model.n_bins, model.bin_kwh, model.low_kwh, list(model.taus),
                         model.charge_kw, model.unit_price, model.start_minute, model.strict,
                         model.electric]).encode())
    return h.hexdigest()[:16]


def _need(cfg: RunConfig, name: str) -> Path:
    p = cfg.path(name)
    if p is None:
        raise ConfigError(f"paths.{name} is not set")
    if not p.exists():
        raise ConfigError(f"paths.{name} does not exist: {p}")
    return p


def _out(cfg: RunConfig) -> Path:
    out = cfg.output
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _suffix(cfg: RunConfig) -> str:
    return "_strict" if cfg["solver"]["strict_paper"] else ""


# ingest --------------------------------------------------------------------

def run_ingest(cfg: RunConfig) -> dict:
    trips_path, graph_path = _need(cfg, "trips"), _need(cfg, "graph")
    out = _out(cfg)
    c = cfg["ingest"]
    graph = RoadGraph.load(graph_path)
    with open(trips_path, encoding="utf-8", newline="") as fh:
        records, report = parse_trips(fh, c["schema"], tuple(c["bbox"]))
    trips, report = ingest(records, graph, report, c["max_snap_m"] / 1000.0, c["discrepancy_km"])
    if not trips:
        raise ArtifactError("no trips survived ingestion")
    meta = {"stage": "ingest", "config": section_hash(cfg, "ingest"),
            "inputs": {"trips": file_hash(trips_path), "graph": file_hash(graph_path)}}
    with open(out / TRIPS, "w", encoding="utf-8", newline="") as fh:
        fh.write("# meta " + json.dumps(meta, sort_keys=True) + "\n")
        write_store(trips, fh)
    write_json(out / INGEST_REPORT, report.to_json(), meta)
    log.info("ingest: kept %d of %d rows", report.kept, report.total)
    return report.to_json()


def _load_trips(cfg: RunConfig):
    path = cfg.output / TRIPS
    meta = read_meta(path)
    if meta.get("config") != section_hash(cfg, "ingest"):
        raise ArtifactError(f"{TRIPS} was built with different ingest settings; rerun ingest")
    check_inputs(meta, {"graph": file_hash(_need(cfg, "graph"))}, TRIPS)
    with open(path, encoding="utf-8") as fh:
        return read_store(fh)


# network -------------------------------------------------------------------

def _table_json(t: StationTable) -> dict:
    return {str(i): {"station": t.station[i], "junction": t.junction[i],
                     "km": t.km[i] if math.isfinite(t.km[i]) else None} for i in sorted(t.station)}


def _table_from_json(d: dict) -> StationTable:
    ids = sorted(int(i) for i in d)
    return StationTable({i: d[str(i)]["station"] for i in ids},
                        {i: d[str(i)]["junction"] for i in ids},
                        {i: math.inf if d[str(i)]["km"] is None else d[str(i)]["km"] for i in ids})


def run_build_network(cfg: RunConfig) -> dict:
    graph_path, st_path = _need(cfg, "graph"), _need(cfg, "stations")
    out = _out(cfg)
    trips = _load_trips(cfg)
    graph = RoadGraph.load(graph_path)
    c = cfg["network"]
    network = label_segment_speeds(trips, graph, c["default_speed_kmh"], c["speed_cap_kmh"])
    idling_ratio_stats(trips, network)
    stations = load_stations(st_path, graph)
    tables = {}
    for mode in ("Mode3", "FastDC"):
        try:
            tables[mode] = _table_json(nearest_charging_stations(graph, stations, mode))
        except ValueError:
            tables[mode] = None
    if all(v is None for v in tables.values()):
        raise ArtifactError("no charging station snapped onto the road graph")
    meta = {"stage": "build-network", "config": section_hash(cfg, "ingest", "network"),
            "inputs": {TRIPS: file_hash(out / TRIPS), "graph": file_hash(graph_path),
                       "stations": file_hash(st_path)}}
    write_json(out / NETWORK, {"network": network.to_json()}, meta)
    write_json(out / STATIONS, {"tables": tables}, meta)
    observed = float(network.observed.mean())
    log.info("network: %d segments, %.1f%% of segment-hours observed", len(graph.segments), 100 * observed)
    return {"segments": len(graph.segments), "observed_share": observed}


def _load_network(cfg: RunConfig) -> SpeedNetwork:
    out = cfg.output
    data = read_json(out / NETWORK)
    meta = data["meta"]
    if meta.get("config") != section_hash(cfg, "ingest", "network"):
        raise ArtifactError(f"{NETWORK} was built with different settings; rerun build-network")
    check_inputs(meta, {TRIPS: file_hash(out / TRIPS)}, NETWORK)
    return SpeedNetwork.from_json(data["network"])


def _load_stations(cfg: RunConfig) -> StationTable:
    data = read_json(cfg.output / STATIONS)
    check_inputs(data["meta"], {TRIPS: file_hash(cfg.output / TRIPS)}, STATIONS)
    mode = cfg["energy"]["charge_mode"]
    table = data["tables"].get(mode)
    if table is None:
        raise ArtifactError(f"no station offers {mode} charging")
    return _table_from_json(table)


# estimation ----------------------------------------------------------------

def _model_trips(cfg: RunConfig, trips, network: SpeedNetwork):
    """Trips with endpoints moved onto the modelled junction set if it is capped."""
    k = int(cfg["estimation"]["aggregate_k"])
    ids = {t.origin for t in trips} | {t.dest for t in trips}
    if k <= 0 or len(ids) <= k:
        return trips, None
    centers = select_centers(trips, k)
    return aggregate_trips(trips, centers, network.graph), centers


def run_estimate(cfg: RunConfig) -> dict:
    out = _out(cfg)
    trips = _load_trips(cfg)
    network = _load_network(cfg)
    c = cfg["estimation"]
    use, centers = _model_trips(cfg, trips, network)
    demand = estimate_demand(use, network, c["day_type"], centers, c["max_gap_min"],
                             c["min_delta_km"], c["default_tau_min"])
    meta = {"stage": "estimate", "config": section_hash(cfg, "ingest", "network", "estimation"),
            "inputs": {TRIPS: file_hash(out / TRIPS), NETWORK: file_hash(out / NETWORK)}}
    write_json(out / DEMAND, {"demand": demand.to_json(),
                              "aggregated": centers is not None}, meta)
    log.info("estimate: %d junctions, tau %.1f-%.1f min", len(demand.junctions),
             float(demand.tau.min()), float(demand.tau.max()))
    return {"junctions": len(demand.junctions), "aggregated": centers is not None}


def _load_demand(cfg: RunConfig) -> DemandModel:
    out = cfg.output
    data = read_json(out / DEMAND)
    meta = data["meta"]
    if meta.get("config") != section_hash(cfg, "ingest", "network", "estimation"):
        raise ArtifactError(f"{DEMAND} was built with different settings; rerun estimate")
    check_inputs(meta, {TRIPS: file_hash(out / TRIPS), NETWORK: file_hash(out / NETWORK)}, DEMAND)
    return DemandModel.from_json(data["demand"])


# solve ---------------------------------------------------------------------

def _service_day(cfg: RunConfig) -> tuple[bool, bool]:
    s = cfg["solver"]
    if s["service_date"] is None:
        return bool(s["weekday"]), False
    try:
        day = date.fromisoformat(str(s["service_date"]))
    except ValueError as exc:
        raise ConfigError(f"solver.service_date is not an ISO date: {s['service_date']}") from exc
    hol = cfg.path("holidays")
    holidays = load_holidays(_need(cfg, "holidays")) if hol is not None else frozenset()
    return day.weekday() < 5, is_holiday(day, holidays)


def energy_setup(cfg: RunConfig):
    e, p = cfg["energy"], cfg["price"]
    a1, a2, a3 = e["alpha"]
    params = EnergyParams(a1, a2, a3, float(e["beta"]), float(e["aux_load_kw"]))
    lo, hi = e["usable"]
    battery = Battery(float(e["battery_kwh"]), float(lo), float(hi))
    mode = MODE3 if e["charge_mode"] == "Mode3" else FAST_DC
    if e["charge_rate_kw"] is not None:
        mode = ChargingMode(mode.mode, float(e["charge_rate_kw"]))
    price = EnergyPrice(float(p["electricity_usd_kwh"]), float(p["gasoline_usd_gal"]), float(p["gallon_kwh"]))
    return params, battery, mode, price


def tariff_from(cfg: RunConfig) -> Tariff:
    return Tariff(**{k: float(v) for k, v in cfg["tariff"].items()})


def model_from(cfg: RunConfig, vehicle: str | None = None) -> MDPModel:
    network, stations, demand = _load_network(cfg), _load_stations(cfg), _load_demand(cfg)
    params, battery, mode, price = energy_setup(cfg)
    s = cfg["solver"]
    weekday, holiday = _service_day(cfg)
    scfg = SolverConfig(horizon_min=int(s["horizon_min"]), shift=s["shift"],
                        battery_bin_pct=float(s["battery_bin_pct"]), battery_bin_kwh=s["battery_bin_kwh"],
                        taus=tuple(int(x) for x in s["taus"]), full_adjacency=bool(s["full_adjacency"]),
                        strict_paper=bool(s["strict_paper"]), weekday=weekday, holiday=holiday)
    return build_model(network, stations, demand, params, battery, mode, tariff_from(cfg), price, scfg,
                       vehicle or cfg["energy"]["vehicle"])


def default_start(cfg: RunConfig, model: MDPModel) -> StartState:
    s = cfg["solver"]
    if s["start_junction"] is not None:
        jid = int(s["start_junction"])
        if jid not in model.index:
            raise ConfigError(f"solver.start_junction {jid} is not a modelled junction")
        i = model.index[jid]
    else:
        p = int(model.period(0))
        rate = model.pickup_rate[p] if model.pickup_rate is not None else model.pickup_prob[p]
        i = int(np.argmax(rate))          # first maximum, i.e. smaller id
    if s["start_soc"] is None:
        b = model.n_bins - 1
    else:
        cap = float(cfg["energy"]["battery_kwh"])
        b = model.bin_of(float(s["start_soc"]) * cap)
    return StartState(i, b)


def _solve_inputs(cfg: RunConfig) -> dict:
    out = cfg.output
    return {DEMAND: file_hash(out / DEMAND), NETWORK: file_hash(out / NETWORK),
            STATIONS: file_hash(out / STATIONS)}


def run_solve(cfg: RunConfig) -> dict:
    out = _out(cfg)
    model = model_from(cfg)
    policy = solve_backward(model)
    start = default_start(cfg, model)
    value = policy.value(0, start.junction, start.battery)
    sfx = _suffix(cfg)
    meta = {"stage": "solve", "config": section_hash(cfg, "energy", "price", "tariff", "solver"),
            "model": model_hash(model), "inputs": _solve_inputs(cfg)}
    write_values(out / f"values{sfx}.csv", policy, meta)
    write_policy(out / f"policy{sfx}.csv", policy, meta)
    summary = {"start_junction": int(model.junctions[start.junction]), "start_bin": start.battery,
               "start_kwh": float(model.level_kwh(start.battery)), "horizon_min": model.horizon,
               "junctions": model.K, "battery_bins": model.n_bins,
               "expected_net_revenue": value if math.isfinite(value) else None,
               "live_states": int((policy.best >= 0).sum())}
    meta_files = dict(meta, outputs={f"values{sfx}.csv": file_hash(out / f"values{sfx}.csv"),
                                     f"policy{sfx}.csv": file_hash(out / f"policy{sfx}.csv")})
    write_json(out / f"solve{sfx}.json", {"summary": summary}, meta_files)
    if not math.isfinite(value):
        raise DeadStateError(f"start state (junction {summary['start_junction']}, bin {start.battery}) "
                             "has no feasible action")
    log.info("solve: R*[0, %d, %d] = %.4f", summary["start_junction"], start.battery, value)
    return summary


def load_policy(cfg: RunConfig) -> tuple[Policy, dict]:
    out = cfg.output
    sfx = _suffix(cfg)
    solved = read_json(out / f"solve{sfx}.json")
    meta = solved["meta"]
    if meta.get("config") != section_hash(cfg, "energy", "price", "tariff", "solver"):
        raise ArtifactError("policy was solved with different settings; rerun solve")
    check_inputs(meta, _solve_inputs(cfg), "policy")
    for name, digest in meta.get("outputs", {}).items():
        if file_hash(out / name) != digest:
            raise ArtifactError(f"{name} changed since it was solved; rerun solve")
    model = model_from(cfg)
    if model_hash(model) != meta["model"]:
        raise ArtifactError("policy/model hash mismatch; rerun solve")
    policy = read_policy(out / f"values{sfx}.csv", out / f"policy{sfx}.csv", model)
    return policy, solved["summary"]


# simulate ------------------------------------------------------------------

def rollout_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


def observed_starts(trips, model: MDPModel, shift: str) -> list[int]:
    """Model index of each taxi-shift's first pick-up, in a fixed order."""
    first: dict[tuple, tuple] = {}
    for t in trips:
        if assign_shift(t.pickup_time) != shift:
            continue
        day = t.pickup_time.date()
        if t.pickup_time.hour < SHIFT_START_HOUR["Morning"]:
            day = date.fromordinal(day.toordinal() - 1)
        key = (t.taxi_id, day.isoformat())
        if key not in first or t.pickup_time < first[key][0]:
            first[key] = (t.pickup_time, t.origin)
    return [model.index[o] for _, (_, o) in sorted(first.items())
            if o in model.index]


def fleet_capacity(cfg: RunConfig, trips, model: MDPModel):
    cap = cfg["simulation"]["capacity"]
    if cap is None:
        return None
    if cap == "data":
        by_id = junction_capacity_from_data(trips, [int(j) for j in model.junctions])
        return np.array([by_id[int(j)] for j in model.junctions], dtype=np.int64)
    if isinstance(cap, int) and cap >= 1:
        return np.full(model.K, cap, dtype=np.int64)
    raise ConfigError("simulation.capacity must be 'data', a positive integer or null")


def run_simulate(cfg: RunConfig, gas_sweep: bool = False) -> dict:
    out = _out(cfg)
    policy, solved = load_policy(cfg)
    model = policy.model
    sim = cfg["simulation"]
    n_taxis, n_roll, seed = int(sim["n_taxis"]), int(sim["n_rollouts"]), int(sim["seed"])
    start = default_start(cfg, model)
    vehicle = cfg["energy"]["vehicle"]
    sfx = _suffix(cfg)
    extra: dict = {}
    if n_taxis == 1:
        results = rollout_many(policy, start, rollout_seeds(seed, n_roll))
        rows = [dict(rollout=n, taxi=0, **r.row()) for n, r in enumerate(results)]
    else:
        trips, _ = _model_trips(cfg, _load_trips(cfg), _load_network(cfg))
        cap = fleet_capacity(cfg, trips, model)
        pool = observed_starts(trips, model, cfg["solver"]["shift"]) or [start.junction]
        rng = np.random.default_rng(seed)
        results, rows, stalls, over = [], [], 0, 0
        for n, s in enumerate(rollout_seeds(seed, n_roll)):
            starts = [StartState(int(j), start.battery) for j in rng.choice(pool, n_taxis)]
            fr = rollout_fleet(policy, starts, s, cap)
            results += fr.results
            rows += [dict(rollout=n, taxi=k, **r.row()) for k, r in enumerate(fr.results)]
            stalls += fr.blocked_stalls
            if cap is not None:
                over += int((fr.occupancy_peak > cap[None, :]).sum())
        extra = {"blocked_stalls": stalls, "capacity_violations": over,
                 "capacity": None if cap is None else
                 {str(int(j)): int(c) for j, c in zip(model.junctions, cap)}}
    summary = summarize(results)
    summary["dp_value"] = solved["expected_net_revenue"]
    payload = {"summary": summary, "fleet": extra, "n_taxis": n_taxis}
    if sim["emissions"]:
        em = emission_report(results, vehicle, cfg["price"]["gallon_kwh"])
        n = max(1, len(results))
        payload["emissions_per_shift"] = {"electricity_kwh": em.electricity_kwh / n,
                                          "gasoline_liters": em.gasoline_liters / n,
                                          "co2_kg": em.co2_kg / n}
    meta = {"stage": "simulate", "config": section_hash(cfg, "simulation"),
            "inputs": {f"solve{sfx}.json": file_hash(out / f"solve{sfx}.json")}}
    rows_to_csv(out / f"results{sfx}.csv", rows, meta)
    if gas_sweep:
        ice = model if not model.electric else model_from(cfg, ICE)
        prices = [float(x) for x in sim["gas_prices"]]
        ice_start = StartState(start.junction, 0)
        sweep = gas_price_sensitivity(ice, prices, ice_start, rollout_seeds(seed, n_roll),
                                      cfg["price"]["gallon_kwh"])
        rows_to_csv(out / f"gas_price_sensitivity{sfx}.csv", sweep, meta)
        payload["gas_price_sensitivity"] = sweep
    write_json(out / f"results{sfx}.json", payload, meta)
    log.info("simulate: mean net revenue %.2f (se %.2f) over %d shifts",
             summary["mean_net_revenue"], summary["se_net_revenue"], summary["n"])
    return summary


# report --------------------------------------------------------------------

def run_report(cfg: RunConfig) -> dict:
    out = _out(cfg)
    sfx = _suffix(cfg)
    res = read_json(out / f"results{sfx}.json")
    check_inputs(res["meta"], {f"solve{sfx}.json": file_hash(out / f"solve{sfx}.json")}, "results")
    policy, solved = load_policy(cfg)
    model = policy.model
    network, demand = _load_network(cfg), _load_demand(cfg)
    trips = _load_trips(cfg)
    params, _, _, price = energy_setup(cfg)
    weekday, _ = _service_day(cfg)
    shift = cfg["solver"]["shift"]
    replay = [r for r in replay_recorded_shifts(trips, network, tariff_from(cfg), price, params,
                                                cfg["energy"]["vehicle"], weekday) if r["shift"] == shift]
    with open(out / f"results{sfx}.csv", encoding="utf-8") as fh:
        sim_rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    sim_net = [float(r["net_revenue"]) for r in sim_rows]
    rec_net = [r["net_revenue"] for r in replay]
    mean = res["summary"]["mean_net_revenue"]
    share_below = float(np.mean([v < mean for v in rec_net])) if rec_net else None
    summary = dict(res["summary"])
    summary.update({"recorded_shifts": len(replay),
                    "recorded_mean_net_revenue": float(np.mean(rec_net)) if rec_net else None,
                    "recorded_share_below_policy_mean": share_below,
                    "policy_delivery_share": (summary["mean_delivery_km"] / summary["mean_total_km"]
                                              if summary["mean_total_km"] else None)})
    if "emissions_per_shift" in res:
        summary.update({f"{k}_per_shift": v for k, v in res["emissions_per_shift"].items()})

    figs = out / "figures"
    figures = [plotting.net_revenue_hist(sim_net, rec_net, solved["expected_net_revenue"],
                                         figs / f"net_revenue{sfx}.png"),
               plotting.energy_split(["policy"], [summary["energy_from_initial_kwh"] / max(1, summary["n"])],
                                     [summary["energy_from_charging_kwh"] / max(1, summary["n"])],
                                     figs / f"energy_split{sfx}.png"),
               plotting.hourly({"tau (min)": demand.tau}, "inter-pick-up duration (min)", figs / "tau.png"),
               plotting.hourly({"delta (km)": demand.delta}, "reachable distance (km)", figs / "delta.png"),
               plotting.hourly({"median": network.idling_median}, "idling ratio", figs / "idling.png"),
               plotting.hourly({"mean": [network.mean_speed(h) for h in range(24)]},
                               "mean segment speed (km/h)", figs / "speed.png")]
    if model.horizon > 0:
        figures.append(plotting.value_heatmap(policy.values[0], model.junctions, model.bin_kwh,
                                              model.low_kwh, figs / f"values{sfx}.png"))
    if "gas_price_sensitivity" in res:
        figures.append(plotting.price_sweep(res["gas_price_sensitivity"], figs / f"gas_price{sfx}.png"))

    meta = {"stage": "report", "inputs": {f"results{sfx}.json": file_hash(out / f"results{sfx}.json")}}
    write_json(out / f"report{sfx}.json",
               {"summary": summary, "recorded_shifts": replay,
                "figures": [str(p.relative_to(out)) for p in figures]}, meta)
    rows_to_csv(out / f"report{sfx}.csv", [{"metric": k, "value": v} for k, v in sorted(summary.items())], meta)
    log.info("report: %d figures", len(figures))
    return summary


# fixtures ------------------------------------------------------------------

def run_synth(out_dir: Path, seed: int | None = None) -> dict:
    from .synth import CitySpec, write_city
    spec = CitySpec() if seed is None else CitySpec(seed=seed)
    paths = write_city(out_dir, spec)
    cfg_text = (
        "paths:\n"
        "  trips: trips.csv\n  graph: graph.json\n  stations: stations.csv\n  output: out\n"
        "solver:\n  horizon_min: 240\n  taus: [0, 10, 20, 30, 60]\n"
        "simulation:\n  n_rollouts: 1000\n  seed: 7\n")
    cfg_path = Path(out_dir) / "config.yaml"
    cfg_path.write_text(cfg_text, encoding="utf-8")
    return {k: str(v) for k, v in dict(paths, config=cfg_path).items()}
