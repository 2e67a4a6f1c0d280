"""End-to-end runs of the ``etaxi`` command on a three-junction fixture city."""

from __future__ import annotations

import csv
import json
import logging
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from etaxi import pipeline
from etaxi.cli import main
from etaxi.config import load_config
from etaxi.sim import rollout_many
from oracle import BruteForce

TINY = Path(__file__).parent / "data" / "tiny"
GOLDEN = json.loads((TINY / "golden.json").read_text())
STAGES = ("ingest", "build-network", "estimate", "solve")


@pytest.fixture
def city(tmp_path):
    for name in ("trips.csv", "graph.json", "stations.csv", "config.yaml"):
        shutil.copy(TINY / name, tmp_path / name)
    return tmp_path


def run(city: Path, *args: str) -> int:
    return main([args[0], "-c", str(city / "config.yaml"), *args[1:]])


def solved(city: Path, *extra: str) -> Path:
    for stage in STAGES:
        assert run(city, stage, *extra) == 0, stage
    return city / "out"


def read_json(path: Path) -> dict:
    return json.loads(path.read_text())


def test_ingest_reports_kept_and_discrepancy(city, capsys):
    assert run(city, "ingest") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["kept"] >= 1
    assert summary["rejected"] == {"route_discrepancy": 1}
    report = read_json(city / "out" / "ingest_report.json")
    assert report["kept"] == summary["kept"]


def test_missing_column_is_a_schema_error(city, caplog):
    rows = list(csv.reader((city / "trips.csv").open()))
    drop = rows[0].index("trip_distance_km")
    with (city / "trips.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows([r[:drop] + r[drop + 1:] for r in rows])
    with caplog.at_level(logging.ERROR):
        assert run(city, "ingest") == 3
    assert "trip_distance_km" in caplog.text


def test_solve_matches_golden_value(city, capsys):
    out = solved(city)
    summary = read_json(out / "solve.json")["summary"]
    assert summary["start_junction"] == GOLDEN["start_junction"]
    assert summary["start_bin"] == GOLDEN["start_bin"]
    assert summary["expected_net_revenue"] == pytest.approx(GOLDEN["expected_net_revenue"], abs=1e-9)
    for name in ("values.csv", "policy.csv"):
        assert (out / name).read_text().startswith("# meta ")


def test_golden_value_is_the_exhaustive_optimum(city):
    solved(city)
    cfg = load_config(city / "config.yaml")
    model = pipeline.model_from(cfg)
    start = pipeline.default_start(cfg, model)
    value = BruteForce(model).value(0, start.junction, start.battery)
    assert value == pytest.approx(GOLDEN["expected_net_revenue"], abs=1e-9)


def test_zero_horizon_gives_empty_policy(city):
    out = solved(city, "--set", "solver.horizon_min=0")
    summary = read_json(out / "solve.json")["summary"]
    assert summary["expected_net_revenue"] == 0.0
    assert summary["live_states"] == 0
    body = [ln for ln in (out / "policy.csv").read_text().splitlines()[2:] if ln.strip()]
    assert body == []


def test_strict_mode_writes_suffixed_outputs(city):
    out = solved(city)
    assert run(city, "solve", "--strict-paper") == 0
    assert run(city, "simulate", "--strict-paper") == 0
    for name in ("values", "policy", "solve", "results"):
        assert list(out.glob(f"{name}_strict.*"))
    plain = read_json(out / "solve.json")["summary"]["expected_net_revenue"]
    strict = read_json(out / "solve_strict.json")["summary"]["expected_net_revenue"]
    assert strict <= plain


def test_simulate_is_deterministic(city):
    out = solved(city)
    assert run(city, "simulate") == 0
    first = {p.name: p.read_bytes() for p in out.glob("results.*")}
    assert run(city, "simulate") == 0
    second = {p.name: p.read_bytes() for p in out.glob("results.*")}
    assert first == second and len(first) == 2


def test_simulate_matches_library_rollouts(city):
    out = solved(city)
    assert run(city, "simulate") == 0
    cfg = load_config(city / "config.yaml")
    policy, _ = pipeline.load_policy(cfg)
    start = pipeline.default_start(cfg, policy.model)
    sim = cfg["simulation"]
    lib = rollout_many(policy, start, pipeline.rollout_seeds(sim["seed"], sim["n_rollouts"]))
    summary = read_json(out / "results.json")["summary"]
    assert summary["n"] == len(lib)
    assert summary["mean_net_revenue"] == pytest.approx(np.mean([r.net_revenue for r in lib]), abs=1e-9)
    assert summary["battery_violations"] == 0


def test_emissions_use_grid_intensity(city):
    out = solved(city)
    assert run(city, "simulate") == 0
    em = read_json(out / "results.json")["emissions_per_shift"]
    assert em["gasoline_liters"] == 0.0
    assert em["co2_kg"] == pytest.approx(0.7007 * em["electricity_kwh"], rel=1e-12)


def test_fleet_simulation_runs(city):
    solved(city)
    assert run(city, "simulate", "--set", "simulation.n_taxis=3",
               "--set", "simulation.n_rollouts=20") == 0
    payload = read_json(city / "out" / "results.json")
    assert payload["n_taxis"] == 3
    assert payload["summary"]["n"] == 60
    assert payload["fleet"]["capacity_violations"] == 0


def test_changed_settings_are_refused(city, caplog):
    solved(city)
    with caplog.at_level(logging.ERROR):
        assert run(city, "simulate", "--set", "energy.battery_kwh=12") == 3
    assert "rerun solve" in caplog.text


def test_tampered_policy_is_refused(city):
    out = solved(city)
    with (out / "policy.csv").open("a") as fh:
        fh.write("\n")
    assert run(city, "simulate") == 3


def test_stale_trips_are_refused(city):
    solved(city)
    assert run(city, "build-network", "--set", "ingest.discrepancy_km=0.6") == 3


def test_missing_models_fail(city):
    assert run(city, "solve") != 0
    assert run(city, "simulate") != 0


def test_config_errors_exit_2(city, tmp_path):
    assert run(city, "ingest", "--set", "solver.no_such_key=1") == 2
    assert main(["ingest", "-c", str(tmp_path / "missing.yaml")]) == 2
    assert run(city, "ingest", "--set", f"paths.trips={tmp_path / 'nope.csv'}") == 2


def test_dead_start_exits_4(city):
    solved(city)
    code = run(city, "solve", "--set", "solver.start_junction=1", "--set", "solver.start_soc=0.05")
    assert code == 4


def test_report_writes_figures(city, capsys):
    out = solved(city)
    assert run(city, "simulate") == 0
    assert run(city, "report") == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["recorded_shifts"] >= 1
    figs = sorted(p.name for p in (out / "figures").glob("*.png"))
    assert {"net_revenue.png", "energy_split.png", "values.png"} <= set(figs)


def test_console_entry_point(city):
    proc = subprocess.run([sys.executable, "-m", "etaxi.cli", "--threads", "1", "ingest",
                           "-c", str(city / "config.yaml")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["kept"] >= 1
