"""Rolling-origin backtests: forecast each test day from earlier data only."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .evaluate import EvalReport, build_report
from .forecast import CurveForecaster, ForecastSettings, PriceForecast, persistence_baseline
from .marketdata import DaySeries
from .revenue import DispatchSchedule, RevenueMetrics, StorageSpec, execute_cost, optimal_schedule


class HistoryError(ValueError):
    pass


def select_test_days(days: Sequence[DaySeries], start: int | None = None,
                     end: int | None = None, horizon_days: int = 1,
                     min_history_days: int = 7) -> list[DaySeries]:
    """Days in ``[start, end]`` that have at least ``min_history_days`` usable days before them.

    Raises ``HistoryError`` if an explicitly requested start lacks history.
    """
    ordered = sorted(days, key=lambda d: d.day_index)
    if not ordered:
        raise HistoryError("dataset is empty")
    index = np.array([d.day_index for d in ordered])

    def usable(day):
        return int(np.searchsorted(index, day.day_index - horizon_days, side="right"))

    if start is None:
        eligible = [d for d in ordered if usable(d) >= min_history_days]
        if not eligible:
            raise HistoryError(f"no day has {min_history_days} days of history")
        start = eligible[0].day_index
    end = index[-1] if end is None else end
    if start > end:
        raise HistoryError("test range is empty")
    chosen = [d for d in ordered if start <= d.day_index <= end]
    if not chosen:
        raise HistoryError("test range does not overlap the dataset")
    short = [d for d in chosen if usable(d) < min_history_days]
    if short:
        raise HistoryError(f"{short[0].date} has fewer than {min_history_days} days of history")
    return chosen


def _ordered_map(fn: Callable, items: Sequence, max_workers: int | None) -> list:
    if max_workers and max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


@dataclass
class RollingRun:
    """Forecasts from the curve pipeline and the persistence baseline, by day."""

    targets: list[DaySeries]
    curve: dict[int, PriceForecast] = field(default_factory=dict)
    persistence: dict[int, PriceForecast] = field(default_factory=dict)

    def prices(self, model: str) -> dict[int, tuple[float, ...]]:
        source = self.curve if model == "curve" else self.persistence
        return {d: fc.prices for d, fc in source.items()}


def rolling_forecast(days: Sequence[DaySeries], targets: Sequence[DaySeries],
                     settings: ForecastSettings = ForecastSettings(),
                     max_workers: int | None = None) -> RollingRun:
    """Forecast every target from data no later than ``target - horizon``.

    Each day only sees its own past, so days can run in any order; results
    are keyed by day.
    """
    forecaster = CurveForecaster(settings)
    history = sorted(days, key=lambda d: d.day_index)
    fcs = _ordered_map(lambda t: forecaster.forecast(history, t), list(targets), max_workers)
    run = RollingRun(list(targets))
    for target, fc in zip(targets, fcs):
        run.curve[target.day_index] = fc
        run.persistence[target.day_index] = persistence_baseline(
            history, target.day_index, settings.horizon_days)
    return run


def evaluate_forecasts(days: Sequence[DaySeries], forecasts: Mapping[int, Sequence[float]]) -> EvalReport:
    return build_report(days, forecasts, days)


def resident_demand(day: DaySeries, fraction: float = 0.01) -> np.ndarray:
    """Resident energy per slot (MWh): market demand in MW scaled by ``fraction``."""
    if not fraction > 0:
        raise ValueError("demand fraction must be positive")
    return day.demand * fraction * (24.0 / day.slots_per_day)


@dataclass
class RevenueRun:
    metrics: RevenueMetrics
    daily: dict[int, RevenueMetrics]
    schedules: dict[int, DispatchSchedule]


def revenue_backtest(days: Sequence[DaySeries], forecasts: Mapping[int, Sequence[float]],
                     spec: StorageSpec = StorageSpec(), fraction: float = 0.01,
                     carry_soc: bool = False) -> RevenueRun:
    """Trade each forecast day through storage and settle at actual prices.

    Every day starts at ``spec.initial_soc`` unless ``carry_soc``, in which
    case each schedule starts where its previous day ended. ``slot_hours``
    comes from the data granularity.
    """
    chosen = sorted((d for d in days if d.day_index in forecasts), key=lambda d: d.day_index)
    if not chosen:
        raise ValueError("no forecast overlaps the actual days")
    total_c = total_c0 = total_ca = 0.0
    daily, schedules = {}, {}
    soc_f = soc_a = spec.initial_soc
    for day in chosen:
        base = replace(spec, slot_hours=24.0 / day.slots_per_day)
        demand = resident_demand(day, fraction)
        actual = day.prices
        forecast = np.asarray(forecasts[day.day_index], dtype=float)
        spec_f = replace(base, initial_soc=soc_f) if carry_soc else base
        spec_a = replace(base, initial_soc=soc_a) if carry_soc else base
        sched_f = optimal_schedule(forecast, demand, spec_f)
        sched_a = optimal_schedule(actual, demand, spec_a)
        c, ca = execute_cost(sched_f, actual), execute_cost(sched_a, actual)
        c0 = float(np.dot(actual, demand))
        daily[day.day_index] = RevenueMetrics.from_costs(c, c0, ca)
        schedules[day.day_index] = sched_f
        total_c, total_c0, total_ca = total_c + c, total_c0 + c0, total_ca + ca
        if carry_soc:
            soc_f = min(max(sched_f.soc[-1] / spec.energy_capacity, 0.0), 1.0)
            soc_a = min(max(sched_a.soc[-1] / spec.energy_capacity, 0.0), 1.0)
    return RevenueRun(RevenueMetrics.from_costs(total_c, total_c0, total_ca), daily, schedules)
