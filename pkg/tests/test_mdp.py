from __future__ import annotations

import math

import numpy as np
import pytest

from etaxi.artifacts import read_policy, write_policy, write_values
from etaxi.mdp import (MDPModel, action_duration, best_actions, delivery_feasible, expected_action_value,
                       reachable_mass, solve_backward, transition)

from conftest import city_model, micro_model
from oracle import BruteForce, enumerate_policies


def hand_model(K=2, H=20, NB=4, **kw):
    """One period, every table set by hand; callers overwrite what they need."""
    z = np.zeros((1, K, K))
    base = dict(junctions=np.arange(1, K + 1), horizon=H, n_bins=NB, bin_kwh=1.0, low_kwh=1.0,
                taus=(0, 30), charge_kw=6.6, unit_price=0.2,
                move_min=np.ones((1, K, K), dtype=int) - np.eye(K, dtype=int)[None],
                energy=z.copy(), dist_km=np.ones((K, K)) - np.eye(K), gross_fare=z.copy(),
                pickup_prob=np.zeros((1, K)), dest_prob=np.tile(np.eye(K), (1, 1, 1)),
                station=np.arange(K), period_minutes=60)
    base.update(kw)
    return MDPModel(**base)


def test_action_duration_examples():
    move = np.array([[[0, 5, 7], [5, 0, 7], [9, 7, 0]]])
    m = hand_model(K=3, move_min=move, station=np.array([1, 1, 1]))
    assert action_duration(m, 0, 0, 2, 0) == 7
    assert action_duration(m, 0, 0, 2, 30) == 42          # 5 + 30 + 7
    assert action_duration(m, 0, 2, 2, 0) == 1            # stall holds one minute


def test_reachable_mass_examples():
    energy = np.array([[[0, 1.0, 2.5], [0, 0, 0], [0, 0, 0]]])
    pd = np.array([[[0, 0.6, 0.4], [0, 1, 0], [0, 0, 1]]])
    m = hand_model(K=3, energy=energy, dest_prob=pd)
    assert reachable_mass(m, 0, 0, 3) == pytest.approx(1.0)
    assert reachable_mass(m, 0, 0, 1) == pytest.approx(0.6)
    assert reachable_mass(m, 0, 0, 0) == 0.0
    assert not delivery_feasible(m, 0, 0, 2, 2)


def test_one_term_hand_value():
    # roam 0 -> 1 costs 0.5 kWh = $0.10; a sure passenger 1 -> 0 nets $8.06; nothing after
    energy = np.array([[[0, 0.5], [0, 0]]])
    gross = np.array([[[0, 0], [8.06, 0]]])
    m = hand_model(H=2, energy=energy, gross_fare=gross, pickup_prob=np.array([[0.0, 1.0]]),
                   dest_prob=np.array([[[1.0, 0], [1.0, 0]]]))
    zeros = np.zeros((m.horizon + 1, m.K, m.n_bins))
    assert expected_action_value(m, zeros, 0, 0, 3, 1, 0) == pytest.approx(7.96)


def test_no_demand_value_is_minus_cost():
    energy = np.array([[[0, 0.5], [0.5, 0]]])
    m = hand_model(H=1, energy=energy)
    zeros = np.zeros((2, 2, 4))
    assert expected_action_value(m, zeros, 0, 0, 3, 1, 0) == pytest.approx(-0.1)
    pol = solve_backward(m)
    assert pol.values[0, 0, 3] == 0.0                     # stalling is free


def test_overrun_truncated_to_terminal():
    move = np.array([[[0, 50], [50, 0]]])
    energy = np.array([[[0, 1.0], [1.0, 0]]])
    m = hand_model(H=10, move_min=move, energy=energy, pickup_prob=np.array([[1.0, 1.0]]),
                   gross_fare=np.full((1, 2, 2), 100.0), dest_prob=np.array([[[0, 1.0], [1.0, 0]]]))
    pol = solve_backward(m)
    assert expected_action_value(m, pol.values, 0, 0, 3, 1, 0) == pytest.approx(-0.2)


def test_zero_horizon():
    m = hand_model(H=0)
    pol = solve_backward(m)
    assert pol.values.shape == (1, 2, 4) and not pol.values.any()
    assert pol.best.size == 0


def test_dead_state_and_forced_recharge():
    # junction 1 has no reachable station; junction 0 hosts one two bins away
    energy = np.array([[[0, 2.0], [2.0, 0]]])
    m = hand_model(energy=energy, station=np.array([0, 0]))
    pol = solve_backward(m)
    assert pol.values[0, 1, 1] == -math.inf and pol.best[0, 1, 1] == -1
    assert best_actions(pol, 0, 1, 1, k=5) == []
    assert np.isfinite(pol.values[0, 1, 2])
    # at the station with an empty battery only staying or charging is possible
    assert np.isfinite(pol.values[0, 0, 0])
    never = hand_model(energy=energy, station=np.array([-1, -1]))
    assert np.all(np.isneginf(solve_backward(never).values[:-1]))


def test_charging_rescues_low_battery():
    # roaming to 1 needs 3 bins plus 3 held back for the way back to the station
    energy = np.array([[[0, 3.0], [3.0, 0]]])
    gross = np.array([[[0, 20.0], [20.0, 0]]])
    # with 32 minutes left there is no time to wait before charging
    m = hand_model(H=32, NB=8, energy=energy, gross_fare=gross,
                   pickup_prob=np.array([[0.0, 1.0]]), dest_prob=np.array([[[0, 1.0], [1.0, 0]]]),
                   station=np.array([0, 0]))
    pol = solve_backward(m)
    assert best_actions(pol, 0, 0, 3, 1)[0][1] == 30
    assert pol.values[0, 0, 3] == pytest.approx(19.4 - (3.0 + 3.3) * 0.2)
    assert solve_backward(hand_model(H=31, NB=8, energy=energy, gross_fare=gross,
                                     pickup_prob=np.array([[0.0, 1.0]]),
                                     dest_prob=np.array([[[0, 1.0], [1.0, 0]]]),
                                     station=np.array([0, 0]))).values[0, 0, 3] == 0.0
    assert transition(m, 0, 0, 3, 1, 0) is None
    tr = transition(m, 0, 0, 3, 1, 1)
    assert tr.charged_bins == 3 and tr.battery == 3 and tr.minutes == 31
    assert tr.cost == pytest.approx((3.0 + 3.3) * 0.2)


def test_enumeration_two_junctions_three_slots():
    for seed in range(6):
        m = micro_model(seed, K=2, H=3, NB=2, taus=(0,))
        pol = solve_backward(m)
        best = enumerate_policies(m)
        for (t, i, b), v in best.items():
            assert pol.values[t, i, b] == pytest.approx(v, abs=1e-9) or (v == -math.inf == pol.values[t, i, b])


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("strict,electric", [(False, True), (True, True), (False, False)])
def test_dp_matches_expectimax(seed, strict, electric):
    m = micro_model(100 + seed, strict=strict, electric=electric)
    pol = solve_backward(m)
    ref = BruteForce(m).table()
    fin = np.isfinite(ref)
    assert np.array_equal(fin, np.isfinite(pol.values))
    assert np.max(np.abs(ref[fin] - pol.values[fin]), initial=0.0) <= 1e-9


def test_three_junction_line_instance():
    rng = np.random.default_rng(5)
    K = 3
    move = np.array([[[0, 1, 2], [1, 0, 1], [2, 1, 0]]])
    energy = move * 0.7
    m = hand_model(K=3, H=5, NB=2, move_min=move, energy=energy, taus=(0, 15),
                   gross_fare=rng.uniform(3, 9, (1, K, K)), pickup_prob=rng.uniform(0, 1, (1, K)),
                   dest_prob=np.full((1, K, K), 1 / 3), station=np.array([1, 1, 1]), charge_kw=4.0)
    pol = solve_backward(m)
    ref = BruteForce(m).table()
    fin = np.isfinite(ref)
    assert np.array_equal(fin, np.isfinite(pol.values))
    assert np.allclose(pol.values[fin], ref[fin], atol=1e-12, rtol=0)


def test_bellman_consistency_and_stored_actions_feasible():
    m = micro_model(42, K=4, H=6, NB=3)
    pol = solve_backward(m)
    for t in range(m.horizon):
        for i in range(m.K):
            for b in range(m.n_bins):
                vals = [expected_action_value(m, pol.values, t, i, b, j, ti) for j, ti in m.actions(i)]
                assert pol.values[t, i, b] == pytest.approx(max(vals), abs=1e-12) or \
                    pol.values[t, i, b] == max(vals) == -math.inf
                for a in (pol.best[t, i, b], pol.second[t, i, b]):
                    if a >= 0:
                        tr = transition(m, t, i, b, *pol.decode(a))
                        assert tr is not None and tr.battery >= 0


def test_best_actions_ranking_and_tie_break():
    m = micro_model(9, K=3, H=5, NB=3)
    pol = solve_backward(m)
    t, i, b = 0, 0, m.n_bins - 1
    top = best_actions(pol, t, i, b, k=1)
    assert pol.decode(pol.best[t, i, b]) == (top[0][0], m.taus.index(top[0][1]))
    two = best_actions(pol, t, i, b, k=2)
    assert two[0][2] >= two[1][2]
    allk = best_actions(pol, t, i, b, k=99)
    feasible = [a for a in m.actions(i) if transition(m, t, i, b, *a) is not None]
    assert len(allk) == len(feasible)
    # an all-zero instance ties everywhere: lower target, then shorter charge
    flat = hand_model(K=3, H=3)
    fp = solve_backward(flat)
    assert fp.decode(fp.best[0, 2, 3]) == (0, 0)


@pytest.mark.parametrize("c", [2.0, 0.5, 4.0])
def test_positive_homogeneity(c):
    m = micro_model(17, K=4, H=6, NB=3)
    scaled = MDPModel(junctions=m.junctions, horizon=m.horizon, n_bins=m.n_bins, bin_kwh=m.bin_kwh,
                      low_kwh=m.low_kwh, taus=m.taus, charge_kw=m.charge_kw, unit_price=m.unit_price * c,
                      move_min=m.move_min, energy=m.energy, dist_km=m.dist_km, gross_fare=m.gross_fare * c,
                      pickup_prob=m.pickup_prob, dest_prob=m.dest_prob, station=m.station,
                      start_minute=m.start_minute, period_minutes=m.period_minutes)
    a, b = solve_backward(m), solve_backward(scaled)
    fin = np.isfinite(a.values)
    assert np.allclose(b.values[fin], c * a.values[fin], atol=1e-12)
    assert np.array_equal(a.best, b.best)


def test_ice_mode_has_no_charging():
    m = micro_model(3, electric=False)
    assert m.taus == (0,) and m.n_bins == 1
    assert not m.reserve_bins.any()
    pol = solve_backward(m)
    assert np.all(np.isfinite(pol.values))


def test_city_model_tables(city):
    m = city_model(city, horizon=60)
    K = m.K
    off = ~np.eye(K, dtype=bool)
    assert K == 25 and m.move_min.shape == (24, K, K)
    assert np.all(m.trip_min[:, off] >= 1) and np.all(np.diagonal(m.move_min, axis1=1, axis2=2) == 0)
    assert np.all(m.energy >= 0) and np.all(m.gross_fare[:, off] >= 3.3)
    assert np.all((m.station >= 0) & (m.station < K))
    assert m.n_bins == 91 and m.bin_kwh == pytest.approx(0.3)
    rows = m.dest_prob.sum(axis=2)
    assert np.allclose(rows[rows > 0], 1.0)
    assert np.all(m.pickup_prob[rows == 0] == 0)


def test_policy_files_round_trip(tmp_path):
    m = micro_model(11, K=3, H=5, NB=3)
    pol = solve_backward(m)
    write_values(tmp_path / "v.csv", pol, {"x": 1})
    write_policy(tmp_path / "p.csv", pol, {"x": 1})
    back = read_policy(tmp_path / "v.csv", tmp_path / "p.csv", m)
    assert np.array_equal(back.values, pol.values)
    assert np.array_equal(back.best, pol.best) and np.array_equal(back.second, pol.second)
