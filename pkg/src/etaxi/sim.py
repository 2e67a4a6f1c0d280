"""Policy rollouts for one taxi and for capacity-constrained fleets."""

from __future__ import annotations

import math
from collections import defaultdict
from datetime import date
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .energy import EnergyParams, trip_energy
from .fare import ELECTRIC, GALLON_KWH, ICE, EnergyPrice, Tariff, fare
from .ingest import SnappedTrip, assign_shift
from .mdp import DeadStateError, MDPModel, Policy, best_actions, delivery_feasible, solve_backward, transition
from .network import NoPathError, SpeedNetwork

CO2_KG_PER_KWH = 0.7007
CO2_KG_PER_LITER = 2.348
LITERS_PER_GALLON = 3.785


@dataclass(frozen=True)
class StartState:
    junction: int       # model index
    battery: int        # bin
    t: int = 0


@dataclass
class ShiftResult:
    net_revenue: float = 0.0
    gross_fare: float = 0.0
    energy_cost: float = 0.0
    delivery_km: float = 0.0
    total_km: float = 0.0
    energy_kwh: float = 0.0
    energy_from_initial_kwh: float = 0.0
    energy_from_charging_kwh: float = 0.0
    charge_events: list = field(default_factory=list)   # (t, station junction id, tau, kWh)
    trips_served: int = 0
    refused: int = 0
    hours_worked: float = 0.0
    battery_violations: int = 0
    legs_kwh: list = field(default_factory=list)

    def finish(self, charged_kwh: float) -> None:
        self.energy_from_charging_kwh = min(charged_kwh, self.energy_kwh)
        self.energy_from_initial_kwh = self.energy_kwh - self.energy_from_charging_kwh

    def row(self) -> dict:
        d = asdict(self)
        d["charge_events"] = len(self.charge_events)
        d.pop("legs_kwh")
        return d


class _Taxi:
    """One taxi's state machine, shared by the single and fleet rollouts."""

    def __init__(self, policy: Policy, start: StartState, rng: np.random.Generator):
        self.policy = policy
        self.model = policy.model
        self.t, self.i, self.b = start.t, start.junction, start.battery
        self.t0 = start.t
        self.rng = rng
        self.res = ShiftResult()
        self.charged = 0.0
        self.charge_min = 0
        self.done = self.t >= self.model.horizon
        self.pending_arrival = False
        self.target = -1

    def _check_battery(self):
        if not 0 <= self.b < self.model.n_bins:
            self.res.battery_violations += 1

    def act(self, j: int, ti: int) -> None:
        m = self.model
        tr = transition(m, self.t, self.i, self.b, j, ti)
        if tr is None:
            raise DeadStateError(f"infeasible action at t={self.t} i={self.i} b={self.b}")
        tau = m.taus[ti]
        if tau > 0:
            r = int(m.station[self.i])
            self.res.charge_events.append((self.t, int(m.junctions[r]), tau, tr.charged_bins * m.bin_kwh))
            self.charged += tr.charged_bins * m.bin_kwh
            self.charge_min += tau
        self.res.energy_cost += tr.cost
        self.res.net_revenue -= tr.cost
        self.res.total_km += tr.km
        self.res.energy_kwh += tr.kwh
        self.res.legs_kwh.append(tr.kwh + tr.charged_kwh)
        self.t, self.i, self.b = tr.arrive, j, tr.battery
        self._check_battery()
        self.pending_arrival = True

    def decide_best(self) -> tuple[int, int]:
        a = int(self.policy.best[self.t, self.i, self.b])
        if a < 0:
            raise DeadStateError(f"dead state t={self.t} i={self.i} b={self.b}")
        return self.policy.decode(a)

    def arrive(self, pickup_prob: float) -> bool:
        """Pick-up lottery at the current junction.  True if a passenger rode."""
        m = self.model
        self.pending_arrival = False
        if self.t >= m.horizon:
            self.done = True
            return False
        u1, u2 = self.rng.random(2)
        if u1 >= pickup_prob:
            return False
        p = int(m.period(self.t))
        row = m.dest_prob[p, self.i]
        cum = np.cumsum(row)
        k = int(np.searchsorted(cum, u2 * cum[-1], side="right"))
        k = min(k, int(np.flatnonzero(row > 0)[-1]))
        j = self.i
        if not delivery_feasible(m, self.t, j, k, self.b):
            self.res.refused += 1
            return False
        kwh = float(m.energy[p, j, k])
        self.res.gross_fare += float(m.gross_fare[p, j, k])
        self.res.energy_cost += kwh * m.unit_price
        self.res.net_revenue += float(m.net_fare[p, j, k])
        self.res.delivery_km += float(m.dist_km[j, k])
        self.res.total_km += float(m.dist_km[j, k])
        self.res.energy_kwh += kwh
        self.res.legs_kwh.append(kwh)
        self.res.trips_served += 1
        self.t += int(m.trip_min[p, j, k])
        self.b -= int(m.energy_bins[p, j, k])
        self.i = k
        self._check_battery()
        if self.t >= m.horizon:
            self.done = True
        return True

    def result(self) -> ShiftResult:
        end = min(self.t, self.model.horizon)
        self.res.hours_worked = max(0, end - self.t0 - self.charge_min) / 60.0
        self.res.finish(self.charged)
        return self.res


def _rng(seed: int, taxi: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(taxi)])


def rollout_single(policy: Policy, start: StartState, seed: int) -> ShiftResult:
    """Simulate one shift following the optimal action everywhere."""
    taxi = _Taxi(policy, start, _rng(seed, 0))
    m = policy.model
    while not taxi.done:
        taxi.act(*taxi.decide_best())
        if taxi.t >= m.horizon:
            break
        taxi.arrive(float(m.pickup_prob[int(m.period(taxi.t)), taxi.i]))
    return taxi.result()


def rollout_many(policy: Policy, start: StartState, seeds: Iterable[int]) -> list[ShiftResult]:
    return [rollout_single(policy, start, s) for s in seeds]


def summarize(results: Sequence[ShiftResult]) -> dict:
    net = np.array([r.net_revenue for r in results], dtype=float)
    n = len(net)
    sd = float(net.std(ddof=1)) if n > 1 else 0.0
    energy = sum(r.energy_kwh for r in results)
    charged = sum(r.energy_from_charging_kwh for r in results)
    return {
        "n": n,
        "mean_net_revenue": float(net.mean()) if n else 0.0,
        "std_net_revenue": sd,
        "se_net_revenue": sd / math.sqrt(n) if n else 0.0,
        "mean_delivery_km": float(np.mean([r.delivery_km for r in results])) if n else 0.0,
        "mean_total_km": float(np.mean([r.total_km for r in results])) if n else 0.0,
        "mean_trips": float(np.mean([r.trips_served for r in results])) if n else 0.0,
        "energy_kwh": energy,
        "energy_from_charging_kwh": charged,
        "energy_from_initial_kwh": energy - charged,
        "battery_violations": int(sum(r.battery_violations for r in results)),
    }


# fleets --------------------------------------------------------------------

@dataclass
class FleetResult:
    results: list[ShiftResult]
    aggregate: dict
    occupancy_peak: np.ndarray       # (H, K) max targeted taxis seen per slot
    capacity: np.ndarray             # (K,)
    blocked_stalls: int = 0


def fleet_pickup_prob(model: MDPModel, p: int, j: int, others: int) -> float:
    """Pick-up probability with ``others`` extra policy taxis competing at ``j``."""
    base = float(model.pickup_prob[p, j])
    if others <= 0 or model.pickup_rate is None or base == 0.0:
        return base
    n_p = float(model.pickup_rate[p, j])
    n_d = float(model.competitor_rate[p, j])
    return n_p / (n_p + n_d + others)


def rollout_fleet(policy: Policy, starts: Sequence[StartState], seed: int,
                  capacity: Sequence[int] | np.ndarray | None = None) -> FleetResult:
    """Run ``len(starts)`` taxis on one policy with junction capacities.

    A taxi takes its best action whose target still has room, else the next
    ranked one; if every target is full it waits one minute in place.  Taxi
    order within a minute is fixed by start index.
    """
    m = policy.model
    H, K = m.horizon, m.K
    cap = np.full(K, np.iinfo(np.int64).max, dtype=np.int64) if capacity is None \
        else np.asarray(capacity, dtype=np.int64)
    occ = np.zeros(K, dtype=np.int64)
    peak = np.zeros((max(H, 1), K), dtype=np.int64)
    taxis = [_Taxi(policy, s, _rng(seed, n)) for n, s in enumerate(starts)]
    stalls = 0

    def release(tx: _Taxi):
        if tx.target >= 0:
            occ[tx.target] -= 1
            tx.target = -1

    for t in range(H):
        for tx in taxis:
            while not tx.done and tx.t == t:
                if tx.pending_arrival:
                    p = int(m.period(t))
                    pp = fleet_pickup_prob(m, p, tx.i, int(occ[tx.i]) - 1)
                    rode = tx.arrive(pp)
                    if rode or tx.done:
                        release(tx)
                    continue
                release(tx)
                j, ti = tx.decide_best()
                if occ[j] >= cap[j]:
                    choice = None
                    for jj, tau, _ in best_actions(policy, tx.t, tx.i, tx.b, k=len(m.actions(tx.i))):
                        if occ[jj] < cap[jj]:
                            choice = (jj, m.taus.index(tau))
                            break
                    if choice is None:
                        stalls += 1
                        tx.t += 1
                        continue
                    j, ti = choice
                occ[j] += 1
                tx.target = j
                peak[t, j] = max(peak[t, j], occ[j])
                tx.act(j, ti)
                if tx.t >= H:
                    tx.done = True
                    release(tx)
    for tx in taxis:
        release(tx)
    results = [tx.result() for tx in taxis]
    return FleetResult(results, summarize(results), peak, cap, stalls)


def junction_capacity_from_data(trips: Sequence[SnappedTrip], junctions: Sequence[int] | None = None,
                                max_gap: float = 120.0) -> dict[int, int]:
    """Mean number of taxis present at each junction over the minutes it is occupied.

    A taxi counts as present at its drop-off junction from the drop-off
    until its next pick-up.  Rounded up, at least 1.
    """
    by_taxi: dict[str, list[SnappedTrip]] = defaultdict(list)
    for t in trips:
        by_taxi[t.taxi_id].append(t)
    presence: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for taxi in sorted(by_taxi):
        seq = sorted(by_taxi[taxi], key=lambda t: (t.pickup_time, t.dropoff_time))
        for a, b in zip(seq, seq[1:]):
            gap = (b.pickup_time - a.dropoff_time).total_seconds() / 60.0
            if 0 < gap <= max_gap:
                s = int(a.dropoff_time.timestamp() // 60)
                presence[a.dest].append((s, s + int(round(gap))))
    ids = sorted(set(junctions) if junctions is not None else set(presence))
    out = {}
    for j in ids:
        iv = presence.get(j)
        if not iv:
            out[j] = 1
            continue
        events = sorted([(s, 1) for s, _ in iv] + [(e, -1) for _, e in iv])
        busy = total = 0
        level = 0
        last = events[0][0]
        for when, d in events:
            if level > 0:
                busy += when - last
                total += level * (when - last)
            level += d
            last = when
        out[j] = max(1, math.ceil(total / busy - 1e-9)) if busy else 1
    return out


# reports -------------------------------------------------------------------

@dataclass(frozen=True)
class EmissionReport:
    electricity_kwh: float
    gasoline_liters: float
    co2_kg: float


def emission_report(results: Iterable[ShiftResult], vehicle: str = ELECTRIC,
                    gallon_kwh: float = GALLON_KWH) -> EmissionReport:
    kwh = float(sum(r.energy_kwh for r in results))
    return emission_from_kwh(kwh, vehicle, gallon_kwh)


def emission_from_kwh(kwh: float, vehicle: str = ELECTRIC, gallon_kwh: float = GALLON_KWH) -> EmissionReport:
    if vehicle == ELECTRIC:
        return EmissionReport(kwh, 0.0, kwh * CO2_KG_PER_KWH)
    liters = kwh / gallon_kwh * LITERS_PER_GALLON
    return EmissionReport(0.0, liters, liters * CO2_KG_PER_LITER)


def fuel_cost(legs_kwh: Iterable[float], price: EnergyPrice, vehicle: str = ICE) -> float:
    """Energy bill of a fixed itinerary at ``price``."""
    return float(sum(legs_kwh)) * price.per_kwh(vehicle)


def gas_price_sensitivity(model_ice: MDPModel, prices: Sequence[float], start: StartState,
                          seeds: Sequence[int], gallon_kwh: float = GALLON_KWH) -> list[dict]:
    """Solve and roll out the ICE policy once per gasoline price (USD/gallon)."""
    rows = []
    for price in prices:
        model = model_ice.with_price(price / gallon_kwh)
        policy = solve_backward(model)
        res = rollout_many(policy, start, seeds)
        s = summarize(res)
        rows.append({"gas_usd_per_gallon": float(price),
                     "dp_value": policy.value(start.t, start.junction, start.battery),
                     "mean_net_revenue": s["mean_net_revenue"],
                     "se_net_revenue": s["se_net_revenue"],
                     "mean_gross_fare": float(np.mean([r.gross_fare for r in res])),
                     "mean_fuel_cost": float(np.mean([r.energy_cost for r in res]))})
    return rows


def replay_recorded_shifts(trips: Sequence[SnappedTrip], network: SpeedNetwork, tariff: Tariff,
                           price: EnergyPrice, params: EnergyParams, vehicle: str = ELECTRIC,
                           weekday: bool = True) -> list[dict]:
    """Net revenue of each recorded taxi-shift.

    Roaming between a drop-off and the next pick-up is taken as the shortest
    path, so distances are lower bounds.  Recorded fares are used when the
    record has one.
    """
    u = price.per_kwh(vehicle)
    groups: dict[tuple, list[SnappedTrip]] = defaultdict(list)
    for t in trips:
        shift_day = t.pickup_time.date() if t.pickup_time.hour >= 5 else \
            date.fromordinal(t.pickup_time.toordinal() - 1)
        groups[(t.taxi_id, str(shift_day), assign_shift(t.pickup_time))].append(t)
    out = []
    for key in sorted(groups):
        seq = sorted(groups[key], key=lambda t: t.pickup_time)
        gross = kwh = deliv = total = 0.0
        for n, t in enumerate(seq):
            clock = t.pickup_time.hour * 60 + t.pickup_time.minute
            try:
                gross += t.recorded_fare if t.recorded_fare is not None else \
                    fare(t.origin, t.dest, clock, network, tariff, weekday)
                kwh += trip_energy(t.origin, t.dest, clock, params, network)
            except NoPathError:
                continue
            deliv += t.distance_km
            total += t.distance_km
            if n + 1 < len(seq):
                nxt = seq[n + 1]
                dclock = t.dropoff_time.hour * 60 + t.dropoff_time.minute
                try:
                    kwh += trip_energy(t.dest, nxt.origin, dclock, params, network)
                    total += network.route(t.dest, nxt.origin).km
                except NoPathError:
                    pass
        out.append({"taxi_id": key[0], "day": key[1], "shift": key[2], "trips": len(seq),
                    "gross_fare": gross, "energy_kwh": kwh, "net_revenue": gross - kwh * u,
                    "delivery_km": deliv, "total_km": total})
    return out
