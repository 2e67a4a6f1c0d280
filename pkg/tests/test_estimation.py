from __future__ import annotations

import json
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from etaxi.estimation import (DemandModel, aggregate_trips, destination_probability, estimate_demand,
                              inter_pickup_duration, inter_pickup_gaps, pickup_probability, ratio,
                              reachable_distance, select_centers)
from etaxi.ingest import SnappedTrip
from etaxi.network import SpeedNetwork

from conftest import line_graph

DAY = datetime(2013, 1, 9)     # a Wednesday


def _trip(taxi, o, d, start, minutes=10):
    return SnappedTrip(taxi, o, d, start, start + timedelta(minutes=minutes), minutes, 1.0)


@pytest.mark.parametrize("n_p,n_d,p", [(10, 30, 0.25), (0, 7, 0.0), (5, 0, 1.0), (0, 0, 0.0)])
def test_ratio_examples(n_p, n_d, p):
    assert ratio(n_p, n_d) == p


@settings(max_examples=100)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 50))
def test_ratio_monotone(n_p, n_d, k):
    assert ratio(n_p + k, n_d) >= ratio(n_p, n_d)
    assert ratio(n_p, n_d + k) <= ratio(n_p, n_d)
    assert 0.0 <= ratio(n_p, n_d) <= 1.0


def test_pickup_probability_window():
    g = line_graph(3, 1.0)
    t0 = DAY.replace(hour=9)
    trips = [_trip("A", 1, 2, t0 + timedelta(minutes=m), 5) for m in (0, 3, 9, 12)]   # 3 inside [9:00, 9:10)
    trips.append(_trip("B", 3, 1, t0 - timedelta(minutes=8), 5))        # drops at 1 at 8:57
    trips.append(_trip("C", 2, 3, t0 - timedelta(minutes=20), 5))       # drops at 3 at 8:45, outside
    p = pickup_probability(1, 540, trips, 10.0, 0.5, g)
    # drop-offs near 1 in [8:50, 9:10): B at 8:57 and A's first two at 9:05, 9:08 (at 2, 0.84 km away: no)
    assert p == pytest.approx(3 / (3 + 1))


def test_destination_probability_examples():
    t = DAY.replace(hour=9)
    trips = [_trip("A", 1, 2 if k < 4 else 3, t + timedelta(minutes=k)) for k in range(20)]
    assert destination_probability(1, 2, 9, trips) == pytest.approx(0.2)
    assert destination_probability(1, 3, 9, trips) == pytest.approx(0.8)
    assert destination_probability(1, 2, 10, trips) is None
    only = [_trip("A", 1, 2, t)]
    assert destination_probability(1, 2, 9, only) == 1.0


def test_inter_pickup_examples():
    t = DAY.replace(hour=9)
    trips = [_trip("A", 1, 2, t, 10), _trip("A", 2, 1, t + timedelta(minutes=25))]
    assert inter_pickup_gaps(trips)[9] == [15.0]
    assert inter_pickup_gaps([_trip("Z", 1, 2, t)]) == {}
    two = [_trip("B", 1, 2, t, 5), _trip("B", 1, 2, t + timedelta(minutes=15), 5),
           _trip("B", 1, 2, t + timedelta(minutes=40), 5)]
    tau = inter_pickup_duration(two)
    assert tau[9] == pytest.approx(15.0)
    assert tau[3] == pytest.approx(15.0)          # filled from the nearest hour


def test_breaks_excluded_and_day_type():
    t = DAY.replace(hour=9)
    trips = [_trip("A", 1, 2, t, 10), _trip("A", 2, 1, t + timedelta(minutes=10 + 150))]
    assert inter_pickup_gaps(trips) == {}
    sat = datetime(2013, 1, 12, 9)
    wk = [_trip("S", 1, 2, sat, 10), _trip("S", 2, 1, sat + timedelta(minutes=30))]
    assert inter_pickup_gaps(wk, "weekday") == {}
    assert inter_pickup_gaps(wk, "weekend")[9] == [20.0]


@pytest.mark.parametrize("speed,tau,delta", [(24.0, 15.0, 6.0), (30.0, 10.0, 5.0), (30.0, 0.2, 0.5)])
def test_reachable_distance(speed, tau, delta):
    net = SpeedNetwork.uniform(line_graph(3, 1.0), speed)
    assert reachable_distance(net, [tau] * 24)[7] == pytest.approx(delta)


def test_length_weighted_mean_speed():
    net = SpeedNetwork.uniform(line_graph(3, 1.0), 10.0)
    g = net.graph
    long_edges = [k for k, s in enumerate(g.segments) if s.src == 1]
    net.speeds[long_edges, 4] = 40.0
    km = g.edge_km
    expect = np.sum(km * net.speeds[:, 4]) / km.sum()
    assert net.mean_speed(4) == pytest.approx(expect)


def _hourly_trips():
    """Taxis whose gaps are all exactly 60 minutes, so tau is one hour everywhere."""
    trips = []
    for n, (o, d) in enumerate([(1, 2), (2, 3), (3, 1), (1, 3), (2, 1)]):
        start = DAY.replace(hour=6, minute=7 * n)
        for k in range(10):
            a, b = (o, d) if k % 2 == 0 else (d, o)
            trips.append(_trip(f"T{n}", a, b, start, 1))
            start += timedelta(minutes=61)
    return trips


def test_estimate_matches_single_window_form():
    g = line_graph(3, 1.0)
    net = SpeedNetwork.uniform(g, 30.0)
    trips = _hourly_trips()
    m = estimate_demand(trips, net)
    assert np.allclose(m.tau, 60.0)
    for h in range(24):
        for i in (1, 2, 3):
            brute = pickup_probability(i, h * 60, trips, 60.0, float(m.delta[h]), g)
            assert m.pickup(h, i) == pytest.approx(brute, abs=1e-12)


def test_duplication_leaves_probabilities_unchanged():
    g = line_graph(3, 1.0)
    net = SpeedNetwork.uniform(g, 30.0)
    trips = _hourly_trips()
    twice = trips + [SnappedTrip(t.taxi_id + "x", t.origin, t.dest, t.pickup_time, t.dropoff_time,
                                 t.duration_min, t.distance_km) for t in trips]
    a, b = estimate_demand(trips, net), estimate_demand(twice, net)
    assert np.allclose(a.pickup_prob, b.pickup_prob, atol=1e-12)
    for h in range(24):
        for i in (1, 2, 3):
            assert a.dest_row(h, i) == pytest.approx(b.dest_row(h, i))


def test_rows_normalised_and_json_round_trip(city):
    m = city["demand"]
    assert np.all((m.pickup_prob >= 0) & (m.pickup_prob <= 1))
    assert np.all(m.tau > 0) and np.all(m.delta > 0)
    for (h, i) in m.dest_counts:
        assert sum(m.dest_row(h, i).values()) == pytest.approx(1.0, abs=1e-9)
    back = DemandModel.from_json(json.loads(json.dumps(m.to_json())))
    assert np.array_equal(back.pickup_prob, m.pickup_prob)
    assert back.dest_counts == m.dest_counts
    assert m.dest_row(9, 999) == {}


def test_aggregation_moves_endpoints_to_centers():
    g = line_graph(5, 1.0)
    t = DAY.replace(hour=9)
    trips = [_trip("A", 1, 5, t), _trip("A", 1, 2, t), _trip("B", 5, 4, t), _trip("C", 3, 1, t)]
    centers = select_centers(trips, 2)
    assert centers == [1, 3]
    moved = aggregate_trips(trips, centers, g)
    assert {(x.origin, x.dest) for x in moved} <= {(a, b) for a in centers for b in centers}
