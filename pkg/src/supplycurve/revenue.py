"""Economic value of a price forecast via battery-backed purchasing.

A resident buys exactly its demand plus net battery flows. A schedule is
optimised against forecast prices, then paid at actual prices:

    C0 = cost without storage, Ca = cost of the schedule optimised on actual
    prices, C = cost of the forecast-driven schedule, R = C0 - C,
    alpha = R / (C0 - Ca).

Round-trip losses are split evenly: stored energy is bought energy times
sqrt(efficiency); delivered energy is withdrawn energy times sqrt(efficiency).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class InfeasibleScheduleError(RuntimeError):
    def __init__(self, slot: int):
        self.slot = slot
        super().__init__(f"no feasible purchase at slot {slot}")


@dataclass(frozen=True)
class StorageSpec:
    energy_capacity: float = 100.0
    power_limit: float = 25.0
    round_trip_efficiency: float = 0.9
    soc_levels: int = 101
    initial_soc: float = 0.0
    slot_hours: float = 1.0
    import_limit: float = math.inf

    def __post_init__(self):
        if not self.energy_capacity > 0 or not self.power_limit > 0:
            raise ValueError("energy_capacity and power_limit must be positive")
        if not 0 < self.round_trip_efficiency <= 1:
            raise ValueError("round_trip_efficiency must lie in (0, 1]")
        if self.soc_levels < 2:
            raise ValueError("soc_levels must be >= 2")
        if not 0 <= self.initial_soc <= 1:
            raise ValueError("initial_soc is a fraction of capacity in [0, 1]")
        if not self.slot_hours > 0:
            raise ValueError("slot_hours must be positive")

    @property
    def quantum(self) -> float:
        return self.energy_capacity / (self.soc_levels - 1)

    @property
    def initial_level(self) -> int:
        return int(round(self.initial_soc * (self.soc_levels - 1)))


@dataclass(frozen=True)
class DispatchSchedule:
    """Per-slot grid purchase, battery flow and end-of-slot state of charge.

    ``charge`` is grid-side energy into the battery when positive and
    energy delivered to the load when negative. ``soc`` has ``K + 1``
    entries, starting with the initial state.
    """

    purchase: np.ndarray
    charge: np.ndarray
    soc: np.ndarray

    def rows(self):
        for t in range(len(self.purchase)):
            yield {"slot": t, "purchase": float(self.purchase[t]),
                   "charge": float(self.charge[t]), "soc": float(self.soc[t + 1])}

    def write_csv(self, path: str | Path, day: str | None = None) -> None:
        fields = (["day"] if day else []) + ["slot", "purchase", "charge", "soc"]
        with Path(path).open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fields, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({"day": day, **row} if day else row)


def _transition_tables(spec: StorageSpec):
    """Grid-side flow and feasibility masks for every (from, to) level pair."""
    levels = np.arange(spec.soc_levels)
    delta = (levels[None, :] - levels[:, None]) * spec.quantum
    root = math.sqrt(spec.round_trip_efficiency)
    flow = np.where(delta > 0, delta / root, delta * root)
    limit = spec.power_limit * spec.slot_hours * (1 + 1e-12)
    return flow, np.abs(flow) <= limit


def _slot_costs(price, demand, flow, rate_ok, spec):
    purchase = demand + flow
    tol = 1e-12 * max(1.0, abs(demand))
    ok = rate_ok & (purchase >= -tol) & (purchase <= spec.import_limit * spec.slot_hours + tol)
    purchase = np.maximum(purchase, 0.0)
    return np.where(ok, price * purchase, np.inf), purchase


def optimal_schedule(prices: Sequence[float], demand: Sequence[float],
                     spec: StorageSpec = StorageSpec()) -> DispatchSchedule:
    """Minimum-cost schedule by backward induction over the SoC grid.

    Exact on the grid. Ties go to the lower state of charge.
    """
    prices = np.asarray(prices, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if prices.shape != demand.shape or prices.ndim != 1:
        raise ValueError("prices and demand must be 1-D sequences of equal length")
    if np.any(demand < 0):
        raise ValueError("demand must be non-negative")
    k, levels = len(prices), spec.soc_levels
    flow, rate_ok = _transition_tables(spec)

    # forward reachability gives the first slot with no feasible move
    reach = np.zeros(levels, bool)
    reach[spec.initial_level] = True
    costs = []
    for t in range(k):
        cost, _ = _slot_costs(prices[t], demand[t], flow, rate_ok, spec)
        costs.append(cost)
        nxt = np.any(np.isfinite(cost[reach]), axis=0)
        if not nxt.any():
            raise InfeasibleScheduleError(t)
        reach = nxt

    value = np.zeros(levels)
    policy = np.zeros((k, levels), dtype=int)
    for t in range(k - 1, -1, -1):
        total = costs[t] + value[None, :]
        best = total.min(axis=1)
        tol = 1e-12 * np.maximum(1.0, np.abs(best))
        with np.errstate(invalid="ignore"):
            near = total <= (best + tol)[:, None]
        policy[t] = np.argmax(near, axis=1)
        value = total[np.arange(levels), policy[t]]

    soc_idx = np.empty(k + 1, dtype=int)
    soc_idx[0] = spec.initial_level
    for t in range(k):
        soc_idx[t + 1] = policy[t, soc_idx[t]]
    steps = flow[soc_idx[:-1], soc_idx[1:]]
    purchase = np.maximum(demand + steps, 0.0)
    return DispatchSchedule(purchase=purchase, charge=steps, soc=soc_idx * spec.quantum)


def execute_cost(schedule: DispatchSchedule, actual_prices: Sequence[float]) -> float:
    """Cost of a fixed schedule paid at ``actual_prices``."""
    prices = np.asarray(actual_prices, dtype=float)
    if prices.shape != schedule.purchase.shape:
        raise ValueError("schedule and price lengths differ")
    return float(np.dot(prices, schedule.purchase))


def check_schedule(schedule: DispatchSchedule, demand: Sequence[float], spec: StorageSpec,
                   atol: float = 1e-9) -> list[str]:
    """Constraint violations of ``schedule``, recomputed from its flows."""
    demand = np.asarray(demand, dtype=float)
    problems = []
    soc = schedule.soc
    if np.any(soc < -atol) or np.any(soc > spec.energy_capacity + atol):
        problems.append("state of charge outside [0, capacity]")
    if np.any(schedule.purchase < -atol):
        problems.append("negative purchase")
    if np.any(np.abs(schedule.charge) > spec.power_limit * spec.slot_hours + atol):
        problems.append("power limit exceeded")
    root = math.sqrt(spec.round_trip_efficiency)
    stored = np.where(schedule.charge > 0, schedule.charge * root, schedule.charge / root)
    if not np.allclose(np.diff(soc), stored, rtol=0, atol=atol):
        problems.append("state of charge inconsistent with flows")
    if not np.allclose(schedule.purchase, demand + schedule.charge, rtol=0, atol=atol):
        problems.append("demand not met exactly")
    return problems


@dataclass(frozen=True)
class RevenueMetrics:
    C: float
    C0: float
    Ca: float
    R: float
    alpha: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        data = asdict(self)
        if math.isnan(self.alpha):
            data["alpha"] = None
        return data

    @classmethod
    def from_costs(cls, C: float, C0: float, Ca: float) -> "RevenueMetrics":
        gap = C0 - Ca
        degenerate = not gap > 1e-9 * max(1.0, abs(C0))
        alpha = math.nan if degenerate else (C0 - C) / gap
        return cls(C=C, C0=C0, Ca=Ca, R=C0 - C, alpha=alpha, degenerate=degenerate)


def revenue_metrics(forecast_prices, actual_prices, demand,
                    spec: StorageSpec = StorageSpec()) -> RevenueMetrics:
    """Cost and revenue of trading on ``forecast_prices`` versus perfect foresight.

    ``alpha`` is NaN and ``degenerate`` set when storage cannot save
    anything even with perfect prices.
    """
    actual = np.asarray(actual_prices, dtype=float)
    demand = np.asarray(demand, dtype=float)
    c0 = float(np.dot(actual, demand))
    ca = execute_cost(optimal_schedule(actual, demand, spec), actual)
    c = execute_cost(optimal_schedule(forecast_prices, demand, spec), actual)
    return RevenueMetrics.from_costs(c, c0, ca)


def period_revenue(days: Sequence[tuple[Sequence[float], Sequence[float], Sequence[float]]],
                   spec: StorageSpec = StorageSpec(), carry_soc: bool = False) -> RevenueMetrics:
    """Aggregate metrics over days of ``(forecast, actual, demand)``.

    Each day starts from ``spec.initial_soc`` unless ``carry_soc``, in which
    case both schedules carry their own end-of-day state into the next day.
    """
    c = c0 = ca = 0.0
    soc_f = soc_a = spec.initial_soc
    for forecast, actual, demand in days:
        actual = np.asarray(actual, float)
        demand = np.asarray(demand, float)
        spec_f = spec if not carry_soc else _with_soc(spec, soc_f)
        spec_a = spec if not carry_soc else _with_soc(spec, soc_a)
        sched_f = optimal_schedule(forecast, demand, spec_f)
        sched_a = optimal_schedule(actual, demand, spec_a)
        c += execute_cost(sched_f, actual)
        ca += execute_cost(sched_a, actual)
        c0 += float(np.dot(actual, demand))
        soc_f = sched_f.soc[-1] / spec.energy_capacity
        soc_a = sched_a.soc[-1] / spec.energy_capacity
    return RevenueMetrics.from_costs(c, c0, ca)


def _with_soc(spec: StorageSpec, frac: float) -> StorageSpec:
    return replace(spec, initial_soc=min(max(frac, 0.0), 1.0))
