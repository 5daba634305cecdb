"""Price forecasts: capacity forest, supply-curve pipeline, persistence, probe."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .curvefit import FitConfig, SupplyCurve, evaluate_curve, fit_curve
from .evaluate import smape
from .marketdata import DaySeries

log = logging.getLogger(__name__)

NUM_LAGS = 7
MIN_HISTORY_DAYS = 15


# -- regression forest ------------------------------------------------------


@dataclass
class RegressionTree:
    """Binary regression tree stored as parallel node arrays.

    ``feature[i] == -1`` marks a leaf whose prediction is ``value[i]``;
    otherwise rows with ``x[feature] <= threshold`` go to ``left[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @classmethod
    def leaf(cls, value: float, count: int = 1) -> "RegressionTree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([float(value)]), np.array([count]))

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=int)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            rows = np.nonzero(inner)[0]
            go_left = X[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist()
                for name in ("feature", "threshold", "left", "right", "value", "count")}

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        ints = {"feature", "left", "right", "count"}
        return cls(**{k: np.asarray(v, dtype=int if k in ints else float) for k, v in data.items()})


def _best_split(X, y, features, min_leaf):
    n = len(y)
    total = y.sum()
    base = float(np.dot(y, y) - total * total / n)
    best = (0.0, -1, 0.0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        csum = np.cumsum(ys)[:-1]
        csq = np.cumsum(ys * ys)[:-1]
        nl = np.arange(1, n)
        nr = n - nl
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        sse = (csq - csum * csum / nl) + ((csq[-1] + ys[-1] ** 2 - csq) - (total - csum) ** 2 / nr)
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        gain = base - sse[i]
        if gain > best[0] + 1e-9 * max(abs(base), 1e-300):
            best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def grow_tree(X, y, max_depth: int, min_leaf: int, max_features: int,
              rng: np.random.Generator) -> RegressionTree:
    """Grow a CART-style regression tree on squared error."""
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(rows):
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1)):
            arr.append(v)
        value.append(float(np.mean(y[rows])))
        count.append(len(rows))
        return len(value) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    n_features = X.shape[1]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= max_depth or len(rows) < 2 * min_leaf:
            continue
        feats = rng.choice(n_features, size=max_features, replace=False)
        gain, f, thr = _best_split(X[rows], y[rows], feats, min_leaf)
        if f < 0:
            continue
        mask = X[rows, f] <= thr
        lo, hi = rows[mask], rows[~mask]
        feature[node], threshold[node] = int(f), float(thr)
        left[node], right[node] = new_node(lo), new_node(hi)
        stack.append((right[node], hi, depth + 1))
        stack.append((left[node], lo, depth + 1))
    return RegressionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value), np.array(count))


@dataclass(frozen=True)
class ForestSettings:
    num_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 2
    feature_subsample: float = 1 / 3
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("num_trees >= 1, max_depth >= 0 and min_leaf >= 1 required")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")


# -- capacity model ---------------------------------------------------------


@dataclass(frozen=True)
class CapacityFeatures:
    lagged_capacity: tuple[float, ...]
    day_of_week: int
    month: int
    mean_forecast_temperature: float | None = None
    mean_forecast_wind: float | None = None

    def vector(self, with_weather: bool) -> np.ndarray:
        if len(self.lagged_capacity) != NUM_LAGS:
            raise ValueError(f"need {NUM_LAGS} capacity lags, got {len(self.lagged_capacity)}")
        row = list(self.lagged_capacity) + [self.day_of_week, self.month]
        if with_weather:
            if self.mean_forecast_temperature is None or self.mean_forecast_wind is None:
                raise ValueError("model expects forecast weather features")
            row += [self.mean_forecast_temperature, self.mean_forecast_wind]
        return np.array(row, dtype=float)


def feature_names(with_weather: bool) -> list[str]:
    names = [f"capacity_lag{k}" for k in range(1, NUM_LAGS + 1)] + ["day_of_week", "month"]
    return names + (["forecast_temperature", "forecast_wind"] if with_weather else [])


def capacity_features(history: dict[int, DaySeries] | Sequence[DaySeries], target_day: int,
                      horizon_days: int = 1,
                      weather: Sequence[tuple[float, float]] | None = None) -> CapacityFeatures | None:
    """Features for forecasting ``target_day``'s capacity; ``None`` if lags are missing.

    Lag 1 is the latest day available at forecast time, ``target_day - horizon_days``.
    """
    if not isinstance(history, dict):
        history = {d.day_index: d for d in history}
    last = target_day - horizon_days
    lags = []
    for k in range(NUM_LAGS):
        day = history.get(last - k)
        if day is None:
            return None
        lags.append(day.capacity)
    date = dt.date.fromordinal(target_day)
    temp = wind = None
    if weather is not None:
        temp = float(np.mean([w[0] for w in weather]))
        wind = float(np.mean([w[1] for w in weather]))
    return CapacityFeatures(tuple(lags), date.weekday(), date.month, temp, wind)


@dataclass
class CapacityModel:
    trees: list[RegressionTree]
    num_trees: int
    max_depth: int
    min_leaf: int
    feature_subsample: float
    seed: int
    with_weather: bool = False
    horizon_days: int = 1
    training_mae: float = math.nan

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.mean([tree.predict(X) for tree in self.trees], axis=0)

    def to_dict(self) -> dict:
        return {
            "num_trees": self.num_trees, "max_depth": self.max_depth, "min_leaf": self.min_leaf,
            "feature_subsample": self.feature_subsample, "seed": self.seed,
            "with_weather": self.with_weather, "horizon_days": self.horizon_days,
            "training_mae": self.training_mae, "features": feature_names(self.with_weather),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CapacityModel":
        data = dict(data)
        data.pop("features", None)
        trees = [RegressionTree.from_dict(t) for t in data.pop("trees")]
        return cls(trees=trees, **data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def capacity_training_set(history: Sequence[DaySeries], horizon_days: int = 1,
                          use_weather: bool = True):
    """Rows ``(features, capacity)`` for every day with a full lag window.

    Weather columns are used only if ``use_weather`` and every day has them.
    """
    by_day = {d.day_index: d for d in history}
    with_weather = use_weather and all(d.forecast_weather is not None for d in history)
    rows, target = [], []
    for day in history:
        feats = capacity_features(by_day, day.day_index, horizon_days,
                                  day.forecast_weather if with_weather else None)
        if feats is None:
            continue
        rows.append(feats.vector(with_weather))
        target.append(day.capacity)
    return np.array(rows).reshape(len(rows), -1), np.array(target), with_weather


def train_capacity_model(history: Sequence[DaySeries], hyper: ForestSettings = ForestSettings(),
                         horizon_days: int = 1, use_weather: bool = True) -> CapacityModel:
    """Bagged regression trees for next-day generation capacity."""
    if len(history) < MIN_HISTORY_DAYS:
        raise ValueError(f"insufficient history: {len(history)} days, need {MIN_HISTORY_DAYS}")
    X, y, with_weather = capacity_training_set(history, horizon_days, use_weather)
    if len(y) < 2:
        raise ValueError("insufficient history: fewer than 2 days with a full lag window")
    max_features = max(1, int(round(hyper.feature_subsample * X.shape[1])))
    trees = []
    for child in np.random.SeedSequence(hyper.seed).spawn(hyper.num_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(len(y), size=len(y)) if hyper.bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[idx], y[idx], hyper.max_depth, hyper.min_leaf, max_features, rng))
    model = CapacityModel(trees, hyper.num_trees, hyper.max_depth, hyper.min_leaf,
                          hyper.feature_subsample, hyper.seed, with_weather, horizon_days)
    model.training_mae = float(np.mean(np.abs(model.predict(X) - y)))
    return model


def predict_capacity(model: CapacityModel, features: CapacityFeatures) -> float:
    return float(model.predict(features.vector(model.with_weather))[0])


# -- price forecasts --------------------------------------------------------


@dataclass(frozen=True)
class PriceForecast:
    day_index: int
    prices: tuple[float, ...]
    capacity_hat: float
    demand_hat: tuple[float, ...]
    curve: SupplyCurve | None = None

    def to_dict(self) -> dict:
        return {"day_index": self.day_index, "prices": list(self.prices),
                "capacity_hat": self.capacity_hat, "demand_hat": list(self.demand_hat),
                "curve": self.curve.to_dict() if self.curve else None}


def write_forecasts_csv(forecasts: Sequence[PriceForecast], path: str | Path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["day", "slot", "price_hat"])
        for fc in forecasts:
            iso = dt.date.fromordinal(fc.day_index).isoformat()
            for h, p in enumerate(fc.prices):
                writer.writerow([iso, h, repr(float(p))])


def read_forecasts_csv(path: str | Path) -> dict[int, list[float]]:
    out: dict[int, dict[int, float]] = {}
    with Path(path).open(newline="") as handle:
        for row in csv.DictReader(handle):
            day = dt.date.fromisoformat(row["day"]).toordinal()
            out.setdefault(day, {})[int(row["slot"])] = float(row["price_hat"])
    return {d: [slots[h] for h in sorted(slots)] for d, slots in out.items()}


def forecast_prices(curve: SupplyCurve, capacity_hat: float, demand_hat: Sequence[float],
                    floor: float = 0.0, cap: float = math.inf, day_index: int = 0) -> PriceForecast:
    """Read prices off the curve at the forecast load rates ``demand / capacity``."""
    if not capacity_hat > 0:
        raise ValueError(f"capacity forecast must be positive, got {capacity_hat}")
    demand = np.asarray(demand_hat, dtype=float)
    if np.any(demand < 0) or not np.all(np.isfinite(demand)):
        raise ValueError("demand forecast must be finite and non-negative")
    prices = np.clip(evaluate_curve(curve, demand / capacity_hat, floor=floor), floor, cap)
    return PriceForecast(day_index, tuple(float(p) for p in np.atleast_1d(prices)),
                         float(capacity_hat), tuple(float(d) for d in demand), curve)


def persistence_baseline(history: Sequence[DaySeries], target_day: int,
                         horizon_days: int = 1) -> PriceForecast:
    """Copy the latest day available at forecast time (``<= target - horizon``)."""
    usable = [d for d in history if d.day_index <= target_day - horizon_days]
    if not usable:
        raise ValueError(f"no day before {target_day} to copy")
    src = max(usable, key=lambda d: d.day_index)
    return PriceForecast(target_day, tuple(float(p) for p in src.prices), src.capacity,
                         tuple(float(v) for v in src.demand))


@dataclass(frozen=True)
class ForecastSettings:
    fit: FitConfig = field(default_factory=FitConfig)
    forest: ForestSettings = field(default_factory=ForestSettings)
    horizon_days: int = 1
    cap_multiplier: float = 3.0

    def __post_init__(self):
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be >= 1")


class CurveForecaster:
    """Fit the curve and capacity model on data available at forecast time,
    then map the target day's demand forecast to prices."""

    def __init__(self, settings: ForecastSettings = ForecastSettings()):
        self.settings = settings

    def available(self, history: Sequence[DaySeries], target_day: int) -> list[DaySeries]:
        cutoff = target_day - self.settings.horizon_days
        return sorted((d for d in history if d.day_index <= cutoff), key=lambda d: d.day_index)

    def capacity_hat(self, past: Sequence[DaySeries], target: DaySeries) -> float:
        s = self.settings
        feats = None
        if len(past) >= MIN_HISTORY_DAYS:
            feats = capacity_features(past, target.day_index, s.horizon_days, target.forecast_weather)
        if feats is None:
            log.warning("%s: too little capacity history, using the latest %d-day mean",
                        target.date, NUM_LAGS)
            return float(np.mean([d.capacity for d in past[-NUM_LAGS:]]))
        model = train_capacity_model(past, s.forest, s.horizon_days,
                                     use_weather=target.forecast_weather is not None)
        return predict_capacity(model, feats)

    def forecast(self, history: Sequence[DaySeries], target: DaySeries,
                 demand_hat: Sequence[float] | None = None) -> PriceForecast:
        s = self.settings
        past = self.available(history, target.day_index)
        if not past:
            raise ValueError(f"no history available before {target.date}")
        if demand_hat is None:
            if target.forecast_demand is None:
                raise ValueError(f"{target.date} has no demand forecast")
            demand_hat = target.forecast_demand
        fit = fit_curve(past, s.fit)
        window = past[-s.fit.lookback_days:]
        top = max(float(d.prices.max()) for d in window)
        cap = s.cap_multiplier * top if top > 0 else math.inf
        return forecast_prices(fit.curve, self.capacity_hat(past, target), demand_hat,
                               floor=s.fit.price_floor, cap=cap, day_index=target.day_index)

    def pipeline(self, history: Sequence[DaySeries]) -> Callable[[DaySeries, Sequence[float]], tuple]:
        return lambda day, demand: self.forecast(history, day, demand).prices


def sensitivity_probe(pipeline: Callable[[DaySeries, Sequence[float]], Sequence[float]],
                      day: DaySeries, mode: str) -> float:
    """sMAPE between forecasts with the original and an altered demand forecast.

    ``mode`` is ``"zero"`` (demand set to 0) or ``"double"``.
    """
    if day.forecast_demand is None:
        raise ValueError(f"{day.date} has no demand forecast to alter")
    base = np.asarray(day.forecast_demand)
    if mode == "zero":
        altered = np.zeros_like(base)
    elif mode == "double":
        altered = 2.0 * base
    else:
        raise ValueError(f"mode must be 'zero' or 'double', got {mode!r}")
    return smape(pipeline(day, base), pipeline(day, altered))
