"""Forecast accuracy metrics and diagnostics."""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .marketdata import DaySeries


def _pair(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {f.size} forecast values")
    if a.size == 0:
        raise ValueError("metrics need at least one value")
    return a, f


def mae(actual, forecast) -> float:
    a, f = _pair(actual, forecast)
    return float(np.mean(np.abs(a - f)))


def rmse(actual, forecast) -> float:
    a, f = _pair(actual, forecast)
    return float(np.sqrt(np.mean((a - f) ** 2)))


def smape(actual, forecast) -> float:
    """Symmetric MAPE as a fraction in [0, 2]; 0/0 terms count as 0."""
    a, f = _pair(actual, forecast)
    denom = np.abs(a) + np.abs(f)
    num = 2.0 * np.abs(a - f)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(np.mean(terms))


def case_subset(test_days: Iterable[DaySeries], history: Iterable[DaySeries],
                window: int = 7) -> list[int]:
    """Days whose forecast demand leaves the prior week's actual-demand envelope.

    The envelope spans actual demand over the ``window`` calendar days
    before each test day.
    """
    by_day = {d.day_index: d for d in history}
    selected = []
    for day in test_days:
        if day.forecast_demand is None:
            raise ValueError(f"{day.date} has no forecast_demand")
        prior = [by_day[i] for i in range(day.day_index - window, day.day_index) if i in by_day]
        if not prior:
            raise ValueError(f"{day.date} has no actual demand in the previous {window} days")
        past = np.concatenate([p.demand for p in prior])
        fd = np.asarray(day.forecast_demand)
        if fd.max() > past.max() or fd.min() < past.min():
            selected.append(day.day_index)
    return selected


def month_key(day_index: int) -> str:
    d = dt.date.fromordinal(day_index)
    return f"{d.year:04d}-{d.month:02d}"


def monthly_mae(pairs: Iterable[tuple[int, Sequence[float], Sequence[float]]]) -> dict[str, float]:
    """MAE per calendar month from ``(day_index, actual, forecast)`` triples."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for day_index, actual, forecast in pairs:
        a, f = _pair(actual, forecast)
        key = month_key(day_index)
        sums[key] = sums.get(key, 0.0) + float(np.sum(np.abs(a - f)))
        counts[key] = counts.get(key, 0) + a.size
    return {k: sums[k] / counts[k] for k in sorted(sums)}


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelation r_0..r_max_lag (biased estimator, r_0 = 1)."""
    x = np.asarray(series, dtype=float)
    if not 0 <= max_lag < x.size:
        raise ValueError(f"series of length {x.size} too short for max_lag={max_lag}")
    dev = x - x.mean()
    denom = float(np.dot(dev, dev))
    if denom == 0:
        raise ValueError("acf undefined for a zero-variance series")
    n = x.size
    return np.array([np.dot(dev[: n - lag], dev[lag:]) / denom for lag in range(max_lag + 1)])


@dataclass
class EvalReport:
    mae: float
    smape: float
    rmse: float
    mae_cs: float | None
    cs_days: int
    monthly_mae: dict[str, float] = field(default_factory=dict)
    num_slots: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, name: str) -> dict:
        return {"model": name, "mae": self.mae, "smape": self.smape, "rmse": self.rmse,
                "mae_cs": "" if self.mae_cs is None else self.mae_cs,
                "cs_days": self.cs_days, "num_slots": self.num_slots}


def build_report(actual_days: Sequence[DaySeries], forecasts: Mapping[int, Sequence[float]],
                 history: Sequence[DaySeries]) -> EvalReport:
    """Score forecasts (keyed by day index) against the matching actual days."""
    days = [d for d in actual_days if d.day_index in forecasts]
    if not days:
        raise ValueError("no forecast overlaps the actual days")
    actual = np.concatenate([d.prices for d in days])
    predicted = np.concatenate([np.asarray(forecasts[d.day_index], float) for d in days])
    known = {d.day_index for d in history}
    cs = [d for d in days if d.forecast_demand is not None
          and any(i in known for i in range(d.day_index - 7, d.day_index))]
    cs_ids = set(case_subset(cs, history)) if cs else set()
    mae_cs = None
    if cs_ids:
        cs_days = [d for d in days if d.day_index in cs_ids]
        mae_cs = mae(np.concatenate([d.prices for d in cs_days]),
                     np.concatenate([np.asarray(forecasts[d.day_index], float) for d in cs_days]))
    return EvalReport(
        mae=mae(actual, predicted),
        smape=smape(actual, predicted),
        rmse=rmse(actual, predicted),
        mae_cs=mae_cs,
        cs_days=len(cs_ids),
        monthly_mae=monthly_mae((d.day_index, d.prices, forecasts[d.day_index]) for d in days),
        num_slots=int(actual.size),
    )
