"""Service-strategy MDP: tables, backward induction and policy queries.

States are (t, junction index, battery bin) with t in minutes since shift
start.  Battery bin ``b`` stands for ``low_kwh + b * bin_kwh``; consumption
is rounded up to whole bins and charging down, so a feasible discrete
action is feasible physically.

Arrival value.  Once a taxi reaches ``j`` at ``t`` with battery ``b`` the
future no longer depends on how it got there::

    W[t, j, b] = (1 - pp * ps) * R[t, j, b]
                 + sum_k feasible pp * pd[j, k] * (F[j, k] + R[t + T[j, k], k, b - e[j, k]])

so the value of an action is ``W[t', j, b'] - cost`` and each backward step
is a gather over precomputed arrival times and batteries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .energy import Battery, ChargingMode, EnergyParams, energy_kwh
from .estimation import DemandModel
from .fare import ELECTRIC, EnergyPrice, Tariff, metered_fare
from .network import HOURS, NoPathError, SpeedNetwork, StationTable

NEG_INF = -math.inf
DEFAULT_TAUS = (0, 10, 20, 30, 60)
_EPS = 1e-9


class DeadStateError(RuntimeError):
    """The queried state has no feasible action."""


@dataclass
class MDPModel:
    """Time-indexed tables over K junctions and P periods.

    Period of shift minute ``t`` is
    ``((start_minute + t) // period_minutes) % n_periods``.
    """

    junctions: np.ndarray        # (K,) junction ids, ascending
    horizon: int
    n_bins: int
    bin_kwh: float
    low_kwh: float
    taus: tuple[int, ...]
    charge_kw: float
    unit_price: float            # USD per kWh
    move_min: np.ndarray         # (P, K, K) int, 0 on the diagonal
    energy: np.ndarray           # (P, K, K) kWh
    dist_km: np.ndarray          # (K, K)
    gross_fare: np.ndarray       # (P, K, K) USD
    pickup_prob: np.ndarray      # (P, K)
    dest_prob: np.ndarray        # (P, K, K)
    station: np.ndarray          # (K,) index of r(i), -1 when unreachable
    roam_mask: np.ndarray | None = None   # (K, K) allowed targets; all pairs if None
    pickup_rate: np.ndarray | None = None      # (P, K) per-window counts, for fleets
    competitor_rate: np.ndarray | None = None
    start_minute: int = 0
    period_minutes: int = 60
    strict: bool = False
    electric: bool = True
    energy_bins: np.ndarray | None = None     # override of rounded consumption
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.junctions = np.asarray(self.junctions)
        K = len(self.junctions)
        self.n_periods = self.move_min.shape[0]
        self.index = {int(j): k for k, j in enumerate(self.junctions)}
        self.taus = tuple(int(x) for x in self.taus)
        if self.taus[0] != 0 or list(self.taus) != sorted(set(self.taus)):
            raise ValueError("tau set must be ascending, unique and start with 0")
        if self.roam_mask is None:
            self.roam_mask = np.ones((K, K), dtype=bool)
        self.roam_mask = self.roam_mask | np.eye(K, dtype=bool)
        self.charge_mask = self.roam_mask.copy()
        ok = self.station >= 0
        self.charge_mask[np.flatnonzero(ok), self.station[ok]] = True
        self.trip_min = np.maximum(self.move_min, 1)
        if self.energy_bins is None:
            if self.electric:
                self.energy_bins = np.ceil(self.energy / self.bin_kwh - _EPS).astype(np.int64)
            else:
                self.energy_bins = np.zeros(self.energy.shape, dtype=np.int64)
        big = self.n_bins + 1
        self.reserve_bins = np.full((self.n_periods, K), big, dtype=np.int64)
        self.reserve_bins[:, ok] = self.energy_bins[:, np.flatnonzero(ok), self.station[ok]]
        if not self.electric:
            # refuelling is outside the model; nothing to hold back
            self.reserve_bins[:] = 0
        self.charge_bins = np.array(
            [int(math.floor(tau / 60.0 * self.charge_kw / self.bin_kwh + _EPS)) for tau in self.taus])
        self.net_fare = self.gross_fare - self.energy * self.unit_price

    @property
    def K(self) -> int:
        return len(self.junctions)

    def period(self, t):
        return ((self.start_minute + np.asarray(t)) // self.period_minutes) % self.n_periods

    def level_kwh(self, b) -> float:
        return self.low_kwh + np.asarray(b) * self.bin_kwh

    def bin_of(self, kwh: float) -> int:
        b = int(math.floor((kwh - self.low_kwh) / self.bin_kwh + _EPS))
        return min(max(b, 0), self.n_bins - 1)

    def with_price(self, unit_price: float) -> "MDPModel":
        return replace(self, unit_price=float(unit_price), energy_bins=self.energy_bins.copy(),
                       roam_mask=self.roam_mask.copy(), meta=dict(self.meta))

    def with_strict(self, strict: bool = True) -> "MDPModel":
        return replace(self, strict=strict, energy_bins=self.energy_bins.copy(),
                       roam_mask=self.roam_mask.copy(), meta=dict(self.meta))

    def actions(self, i: int) -> list[tuple[int, int]]:
        """(target index, tau index) pairs in tie-break order."""
        out = []
        for j in range(self.K):
            for ti, tau in enumerate(self.taus):
                mask = self.roam_mask if tau == 0 else self.charge_mask
                if mask[i, j] and (tau == 0 or self.station[i] >= 0):
                    out.append((j, ti))
        return out


@dataclass(frozen=True)
class Transition:
    arrive: int          # t'
    battery: int         # b'
    cost: float          # U^a in USD
    minutes: int         # T^a
    km: float
    kwh: float           # energy drawn from the battery
    charged_kwh: float   # purchased charge (billed)
    charged_bins: int    # bins actually added


def action_duration(model: MDPModel, t: int, i: int, j: int, tau: int) -> int:
    p = int(model.period(t))
    if tau == 0:
        return int(model.trip_min[p, i, j])
    r = int(model.station[i])
    if r < 0:
        raise NoPathError("no charging station reachable")
    t1 = int(model.move_min[p, i, r]) + tau
    p1 = int(model.period(t + t1))
    return t1 + int(model.move_min[p1, r, j])


def transition(model: MDPModel, t: int, i: int, b: int, j: int, ti: int) -> Transition | None:
    """Deterministic part of an action; None when infeasible."""
    tau = model.taus[ti]
    p = int(model.period(t))
    if tau == 0:
        if not model.roam_mask[i, j]:
            return None
        tp = t + int(model.trip_min[p, i, j])
        bp = b - int(model.energy_bins[p, i, j])
        kwh = float(model.energy[p, i, j])
        cost = kwh * model.unit_price
        km = float(model.dist_km[i, j])
        charged, cbins = 0.0, 0
    else:
        r = int(model.station[i])
        if r < 0 or not model.charge_mask[i, j]:
            return None
        need = int(model.reserve_bins[p, i])
        if b < need:
            return None
        t1 = t + int(model.move_min[p, i, r]) + tau
        p1 = int(model.period(t1))
        full = b - need + int(model.charge_bins[ti])
        c = min(full, model.n_bins - 1)
        bp = c - int(model.energy_bins[p1, r, j])
        tp = t1 + int(model.move_min[p1, r, j])
        kwh = float(model.energy[p, i, r] + model.energy[p1, r, j])
        charged = tau / 60.0 * model.charge_kw
        cbins = c - (b - need)
        cost = (kwh + charged) * model.unit_price
        km = float(model.dist_km[i, r] + model.dist_km[r, j])
    if bp < 0 or bp < int(model.reserve_bins[int(model.period(tp)), j]):
        return None
    return Transition(tp, bp, cost, tp - t, km, kwh, charged, cbins)


def delivery_feasible(model: MDPModel, t: int, j: int, k: int, b: int) -> bool:
    """Battery ``b`` covers the trip j -> k and then reaching r(k)."""
    p = int(model.period(t))
    rest = b - int(model.energy_bins[p, j, k])
    tk = t + int(model.trip_min[p, j, k])
    return rest >= 0 and rest >= int(model.reserve_bins[int(model.period(tk)), k])


def reachable_mass(model: MDPModel, t: int, j: int, b: int) -> float:
    """Probability mass of destinations the taxi can accept at (t, j, b)."""
    p = int(model.period(t))
    return float(sum(model.dest_prob[p, j, k] for k in range(model.K)
                     if model.dest_prob[p, j, k] > 0 and delivery_feasible(model, t, j, k, b)))


@dataclass
class Policy:
    model: MDPModel
    values: np.ndarray      # (H + 1, K, NB)
    best: np.ndarray        # (H, K, NB) flat action index j * n_tau + tau index, -1 if dead
    second: np.ndarray
    arrival: np.ndarray | None = field(default=None, repr=False)    # W, rebuilt on demand

    def arrival_table(self) -> np.ndarray:
        if self.arrival is None:
            W = np.zeros_like(self.values)
            for t in range(self.model.horizon):
                W[t] = _arrival_values(self.model, self.values, t)
            self.arrival = W
        return self.arrival

    def value(self, t: int, i: int, b: int) -> float:
        return float(self.values[t, i, b])

    def decode(self, a: int) -> tuple[int, int]:
        n = len(self.model.taus)
        return int(a) // n, int(a) % n


def expected_action_value(model: MDPModel, values: np.ndarray, t: int, i: int, b: int,
                          j: int, ti: int) -> float:
    """Expected net revenue of one action against a value table.

    Evaluates the recurrence directly from ``values`` (not the arrival
    table), so it doubles as a Bellman-consistency check after a solve.
    Infeasible actions return -inf.
    """
    tr = transition(model, t, i, b, j, ti)
    if tr is None:
        return NEG_INF
    H = model.horizon
    tp, bp = tr.arrive, tr.battery
    if tp >= H:
        return -tr.cost
    p = int(model.period(tp))
    pp = float(model.pickup_prob[p, j])
    total = 0.0
    mass = 0.0
    if pp > 0:
        for k in range(model.K):
            pd = float(model.dest_prob[p, j, k])
            if pd <= 0 or not delivery_feasible(model, tp, j, k, bp):
                continue
            prob = pp * pd
            mass += prob
            cont = values[min(tp + int(model.trip_min[p, j, k]), H), k,
                          bp - int(model.energy_bins[p, j, k])]
            gain = float(model.net_fare[p, j, k])
            if model.strict:
                gain -= float(model.energy[p, j, k])
            total += prob * (gain + cont)
    stay = 1.0 - mass
    if stay > 0:
        total += stay * values[tp, j, bp]
    return total - tr.cost


def _gather(table: np.ndarray, t: np.ndarray, j: np.ndarray, b: np.ndarray, H: int) -> np.ndarray:
    return table[np.minimum(t, H), j, np.clip(b, 0, table.shape[2] - 1)]


def _action_values(model: MDPModel, W: np.ndarray, t: int, rows: np.ndarray) -> np.ndarray:
    """Q[i, j, tau, b] for origins ``rows``; -inf where infeasible."""
    K, NB, H = model.K, model.n_bins, model.horizon
    n_tau = len(model.taus)
    p = int(model.period(t))
    bs = np.arange(NB)
    jj = np.arange(K)[None, :, None]
    Q = np.full((len(rows), K, n_tau, NB), NEG_INF)

    tp = t + model.trip_min[p][rows]                                  # (R, K)
    bp = bs[None, None, :] - model.energy_bins[p][rows][:, :, None]   # (R, K, NB)
    res = model.reserve_bins[model.period(tp), np.arange(K)[None, :]]
    feas = model.roam_mask[rows][:, :, None] & (bp >= 0) & (bp >= res[:, :, None])
    val = _gather(W, tp[:, :, None], jj, bp, H) - (model.energy[p][rows] * model.unit_price)[:, :, None]
    Q[:, :, 0, :] = np.where(feas, val, NEG_INF)

    r = model.station[rows]
    has = r >= 0
    rr = np.where(has, r, 0)
    need = model.reserve_bins[p][rows]                                # (R,)
    for ti in range(1, n_tau):
        tau = model.taus[ti]
        t1 = t + model.move_min[p][rows, rr] + tau                    # (R,)
        p1 = model.period(t1)
        tp = t1[:, None] + model.move_min[p1[:, None], rr[:, None], np.arange(K)[None, :]]
        c = np.minimum(bs[None, :] - need[:, None] + model.charge_bins[ti], NB - 1)   # (R, NB)
        e2 = model.energy_bins[p1[:, None], rr[:, None], np.arange(K)[None, :]]        # (R, K)
        bp = c[:, None, :] - e2[:, :, None]
        res = model.reserve_bins[model.period(tp), np.arange(K)[None, :]]
        feas = (model.charge_mask[rows] & has[:, None])[:, :, None] \
            & (bs[None, None, :] >= need[:, None, None]) & (bp >= 0) & (bp >= res[:, :, None])
        kwh = (model.energy[p][rows, rr][:, None]
               + model.energy[p1[:, None], rr[:, None], np.arange(K)[None, :]])
        cost = (kwh + tau / 60.0 * model.charge_kw) * model.unit_price
        val = _gather(W, tp[:, :, None], jj, bp, H) - cost[:, :, None]
        Q[:, :, ti, :] = np.where(feas, val, NEG_INF)
    Q[~np.isfinite(Q)] = NEG_INF
    return Q


def _arrival_values(model: MDPModel, R: np.ndarray, t: int) -> np.ndarray:
    K, NB, H = model.K, model.n_bins, model.horizon
    p = int(model.period(t))
    bs = np.arange(NB)
    tk = t + model.trip_min[p]                                   # (K, K) [j, k]
    bk = bs[None, None, :] - model.energy_bins[p][:, :, None]    # (K, K, NB)
    res = model.reserve_bins[model.period(tk), np.arange(K)[None, :]]
    feas = (bk >= 0) & (bk >= res[:, :, None])
    prob = model.pickup_prob[p][:, None] * model.dest_prob[p]    # (K, K)
    take = feas & (prob > 0)[:, :, None]
    gain = model.net_fare[p] - (model.energy[p] if model.strict else 0.0)
    cont = _gather(R, tk[:, :, None], np.arange(K)[None, :, None], bk, H)
    with np.errstate(invalid="ignore"):
        terms = np.where(take, prob[:, :, None] * (gain[:, :, None] + cont), 0.0)
    mass = np.where(take, prob[:, :, None], 0.0).sum(axis=1)     # (K, NB)
    stay = 1.0 - mass
    with np.errstate(invalid="ignore"):
        here = np.where(stay > 0, stay * R[t], 0.0)
    return here + terms.sum(axis=1)


def solve_backward(model: MDPModel, chunk: int = 64) -> Policy:
    """Backward induction from the end of the shift.

    Ties go to the lower target index, then the shorter charge.
    """
    H, K, NB = model.horizon, model.K, model.n_bins
    n_tau = len(model.taus)
    R = np.zeros((H + 1, K, NB))
    W = np.zeros((H + 1, K, NB))
    best = np.full((H, K, NB), -1, dtype=np.int32)
    second = np.full((H, K, NB), -1, dtype=np.int32)
    for t in range(H - 1, -1, -1):
        for lo in range(0, K, chunk):
            rows = np.arange(lo, min(K, lo + chunk))
            Q = _action_values(model, W, t, rows).reshape(len(rows), K * n_tau, NB)
            a1 = np.argmax(Q, axis=1)                                  # (R, NB)
            v1 = np.take_along_axis(Q, a1[:, None, :], axis=1)[:, 0, :]
            np.put_along_axis(Q, a1[:, None, :], NEG_INF, axis=1)
            a2 = np.argmax(Q, axis=1)
            v2 = np.take_along_axis(Q, a2[:, None, :], axis=1)[:, 0, :]
            R[t, rows] = v1
            best[t, rows] = np.where(np.isfinite(v1), a1, -1)
            second[t, rows] = np.where(np.isfinite(v2), a2, -1)
        W[t] = _arrival_values(model, R, t)
    return Policy(model, R, best, second, W)


def best_actions(policy: Policy, t: int, i: int, b: int, k: int = 1) -> list[tuple[int, int, float]]:
    """Top-``k`` feasible actions as (target index, tau, value), best first."""
    model = policy.model
    if t >= model.horizon or policy.best[t, i, b] < 0:
        return []
    n_tau = len(model.taus)
    q = _action_values(model, policy.arrival_table(), t, np.array([i])).reshape(-1, model.n_bins)[:, b]
    live = np.flatnonzero(np.isfinite(q))
    # stable sort keeps the lower target, then shorter charge, first among ties
    order = live[np.argsort(-q[live], kind="stable")][:k]
    return [(int(a) // n_tau, model.taus[int(a) % n_tau], float(q[a])) for a in order]


# model construction --------------------------------------------------------

@dataclass
class SolverConfig:
    horizon_min: int = 720
    shift: str = "Morning"
    battery_bin_pct: float = 1.0
    battery_bin_kwh: float | None = None
    taus: tuple[int, ...] = DEFAULT_TAUS
    aggregate_k: int = 200
    full_adjacency: bool = False
    strict_paper: bool = False
    weekday: bool = True
    holiday: bool = False


SHIFT_START_MIN = {"Morning": 5 * 60, "Evening": 17 * 60}


def build_model(network: SpeedNetwork, stations: StationTable, demand: DemandModel,
                params: EnergyParams, battery: Battery, charging: ChargingMode,
                tariff: Tariff, price: EnergyPrice, cfg: SolverConfig,
                vehicle: str = ELECTRIC) -> MDPModel:
    """Precompute every hourly table the solver and simulator read."""
    graph = network.graph
    electric = vehicle == ELECTRIC
    if cfg.full_adjacency:
        junctions = list(graph.ids)
    else:
        extra = {stations.junction[j] for j in demand.junctions if stations.junction.get(j) is not None}
        junctions = sorted(set(demand.junctions) | extra)
    K = len(junctions)
    index = {j: k for k, j in enumerate(junctions)}

    # route incidence: one row per ordered pair
    rows, cols = [], []
    dist = np.full((K, K), np.inf)
    for a, i in enumerate(junctions):
        for c, j in enumerate(junctions):
            try:
                route = network.route(i, j)
            except NoPathError:
                continue
            dist[a, c] = route.km
            rows.extend([a * K + c] * len(route.edges))
            cols.extend(route.edges)
    if not np.all(np.isfinite(dist)):
        bad = np.argwhere(~np.isfinite(dist))[0]
        raise NoPathError(f"junctions {junctions[bad[0]]} and {junctions[bad[1]]} are disconnected")
    n_e = len(graph.segments)
    M = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(K * K, n_e))
    km = graph.edge_km

    move = np.zeros((HOURS, K, K), dtype=np.int64)
    energy = np.zeros((HOURS, K, K))
    gross = np.zeros((HOURS, K, K))
    off = ~np.eye(K, dtype=bool)
    for h in range(HOURS):
        v = network.speeds[:, h]
        drive = (M @ (km / v)).reshape(K, K) * 60.0
        fast_km = (M @ np.where(v >= tariff.slow_speed_kmh, km, 0.0)).reshape(K, K)
        slow = (M @ np.where(v < tariff.slow_speed_kmh, km / v, 0.0)).reshape(K, K) * 60.0
        lam = float(network.idling_median[h])
        idle = drive * lam / (1.0 - lam)
        total = drive + idle
        m = np.where(total > 0, np.ceil(total - _EPS), 0).astype(np.int64)
        move[h] = np.where(off, np.maximum(m, 1), 0)
        energy[h] = energy_kwh(dist, drive, move[h], params)
        gross[h] = metered_fare(fast_km, slow, idle, h * 60, tariff, cfg.weekday, cfg.holiday)

    pp = np.zeros((HOURS, K))
    rate_p = np.zeros((HOURS, K))
    rate_d = np.zeros((HOURS, K))
    pd = np.zeros((HOURS, K, K))
    prob = demand.pickup_prob
    for j in demand.junctions:
        a = index[j]
        dk = demand.index[j]
        pp[:, a] = prob[:, dk]
        rate_p[:, a] = demand.pickup_rate[:, dk]
        rate_d[:, a] = demand.competitor_rate[:, dk]
        for h in range(HOURS):
            for k, q in demand.dest_row(h, j).items():
                if k in index:
                    pd[h, a, index[k]] = q
    # rows with no recorded destinations carry no pick-up mass
    pp = np.where(pd.sum(axis=2) > 0, pp, 0.0)

    station = np.array([index.get(stations.junction.get(j), -1) if stations.junction.get(j) is not None
                        else -1 for j in junctions])
    roam = None
    if cfg.full_adjacency:
        roam = np.zeros((K, K), dtype=bool)
        for j in junctions:
            for n in graph.neighbors(j):
                roam[index[j], index[n]] = True

    if electric:
        bin_kwh = cfg.battery_bin_kwh or cfg.battery_bin_pct / 100.0 * battery.capacity_kwh
        n_bins = int(math.floor((battery.high - battery.low) / bin_kwh + _EPS)) + 1
        taus = tuple(cfg.taus)
        low = battery.low
    else:
        bin_kwh, n_bins, taus, low = 1.0, 1, (0,), 0.0
    return MDPModel(
        junctions=np.array(junctions), horizon=int(cfg.horizon_min), n_bins=n_bins,
        bin_kwh=float(bin_kwh), low_kwh=float(low), taus=taus, charge_kw=charging.rate_kw,
        unit_price=price.per_kwh(vehicle), move_min=move, energy=energy, dist_km=dist,
        gross_fare=gross, pickup_prob=pp, dest_prob=pd, station=station, roam_mask=roam,
        pickup_rate=rate_p, competitor_rate=rate_d,
        start_minute=SHIFT_START_MIN[cfg.shift], period_minutes=60,
        strict=cfg.strict_paper, electric=electric,
        meta={"vehicle": vehicle, "battery_kwh": battery.capacity_kwh, "beta": params.beta,
              "charge_mode": charging.mode})
