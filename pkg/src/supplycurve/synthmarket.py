"""Synthetic day-ahead markets with a known supply curve.

Random streams are spawned from ``SeedSequence(seed)`` in a fixed order so
each source of randomness can be replayed on its own:

    0 curve drift, 1 demand noise, 2 capacity noise, 3 price noise,
    4 forecast-demand noise, 5 weather.

Per day ``d >= 1`` the drift stream draws ``uniform(-1, 1, n)`` for the
slopes and then ``uniform(-1, 1, n - 1)`` for the breakpoints, redrawing
both when the perturbed curve would be invalid.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curvefit import SupplyCurve, evaluate_curve
from .marketdata import DaySeries, SlotRecord, write_csv

DEFAULT_CURVE = SupplyCurve.from_anchor(
    breakpoints=(0.50, 0.76), slopes=(300.0, 60.0, 600.0), anchor_price=5.0,
    fit_domain=(0.40, 0.95),
)

STREAMS = ("drift", "demand", "capacity", "price", "forecast", "weather")


@dataclass(frozen=True)
class DemandProfile:
    """Daily sinusoid ``base - amplitude * cos(2*pi*h/K + phase)`` plus noise."""

    base: float = 42000.0
    amplitude: float = 12000.0
    phase: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    num_days: int = 30
    slots_per_day: int = 96
    true_curve: SupplyCurve = DEFAULT_CURVE
    curve_drift_per_day: float = 0.0
    demand_profile: DemandProfile = field(default_factory=DemandProfile)
    capacity_base: float = 65000.0
    capacity_noise_std: float = 0.0
    price_noise_std: float = 0.0
    seed: int = 0
    start_date: dt.date = dt.date(2023, 4, 1)
    surge_days: tuple[int, ...] = ()
    surge_factor: float = 1.5

    def __post_init__(self):
        if self.slots_per_day not in (24, 96):
            raise ValueError("slots_per_day must be 24 or 96")
        if self.num_days < 1:
            raise ValueError("num_days must be >= 1")
        stds = (self.demand_profile.noise_std, self.capacity_noise_std, self.price_noise_std)
        if min(stds) < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if not 0 <= self.curve_drift_per_day < 0.2:
            raise ValueError("curve_drift_per_day must lie in [0, 0.2)")
        if any(not 0 <= d < self.num_days for d in self.surge_days):
            raise ValueError("surge_days must be day offsets inside the horizon")


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def _valid(breakpoints, slopes, domain) -> bool:
    lo, hi = domain
    if min(slopes) < 0:
        return False
    bps = list(breakpoints)
    if bps and not (lo < bps[0] and bps[-1] < hi):
        return False
    return all(a < b for a, b in zip(bps, bps[1:]))


def drift_curve(curve: SupplyCurve, drift: float, rng: np.random.Generator) -> SupplyCurve:
    """One day of drift: multiplicative on slopes, additive on breakpoints.

    Breakpoint shifts are scaled by the width of the curve's domain. The
    price at the left end of the domain stays fixed.
    """
    if drift == 0:
        return curve
    lo, hi = curve.fit_domain
    anchor = curve.slopes[0] * lo + curve.intercepts[0]
    while True:
        slopes = np.asarray(curve.slopes) * (1 + drift * rng.uniform(-1, 1, curve.n))
        bps = np.asarray(curve.breakpoints) + drift * (hi - lo) * rng.uniform(-1, 1, curve.n - 1)
        if _valid(bps, slopes, curve.fit_domain):
            return SupplyCurve.from_anchor(tuple(bps), tuple(slopes), anchor, curve.fit_domain)


def generate(config: SynthConfig) -> tuple[list[DaySeries], list[SupplyCurve]]:
    """Simulate ``config.num_days`` cleared days and their true curves."""
    rng = streams(config.seed)
    k = config.slots_per_day
    prof = config.demand_profile
    angle = 2 * np.pi * np.arange(k) / k + prof.phase
    shape = -np.cos(angle)
    surges = set(config.surge_days)

    days, truths = [], []
    curve = config.true_curve
    for d in range(config.num_days):
        if d > 0:
            curve = drift_curve(curve, config.curve_drift_per_day, rng["drift"])
        truths.append(curve)
        amp = prof.amplitude * (config.surge_factor if d in surges else 1.0)
        demand = prof.base + amp * shape + rng["demand"].normal(0.0, prof.noise_std, k)
        demand = np.maximum(demand, 1.0)
        capacity = config.capacity_base + rng["capacity"].normal(0.0, config.capacity_noise_std)
        capacity = max(capacity, 1.0)
        supply = demand
        load_rate = supply / capacity
        price = evaluate_curve(curve, load_rate, floor=-np.inf)
        price = np.maximum(price + rng["price"].normal(0.0, config.price_noise_std, k), 0.0)
        forecast = np.maximum(demand + rng["forecast"].normal(0.0, prof.noise_std, k), 1.0)

        day_index = config.start_date.toordinal() + d
        doy = (config.start_date + dt.timedelta(days=d)).timetuple().tm_yday
        temperature = (12 + 10 * np.sin(2 * np.pi * (doy - 110) / 365) + 4 * shape
                       + rng["weather"].normal(0.0, 1.0, k))
        wind = np.abs(rng["weather"].normal(5.0, 2.0, k))
        slots = tuple(
            SlotRecord(day_index, h, float(price[h]), float(demand[h]), float(supply[h]),
                       float(capacity), float(temperature[h]), float(wind[h]))
            for h in range(k)
        )
        days.append(DaySeries(day_index, slots, tuple(float(v) for v in forecast)))
    return days, truths


def truth_records(days: list[DaySeries], truths: list[SupplyCurve]) -> list[dict]:
    return [{"day": day.date.isoformat(), "day_index": day.day_index, **curve.to_dict()}
            for day, curve in zip(days, truths)]


def write_synthetic(days, truths, out_dir: str | Path, stem: str = "market") -> tuple[Path, Path]:
    """Write the canonical CSV and the ground-truth sidecar JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, truth_path = out / f"{stem}.csv", out / f"{stem}_truth.json"
    write_csv(days, csv_path)
    truth_path.write_text(json.dumps(truth_records(days, truths), indent=1) + "\n")
    return csv_path, truth_path


def load_truth(path: str | Path) -> dict[int, SupplyCurve]:
    records = json.loads(Path(path).read_text())
    return {r["day_index"]: SupplyCurve.from_dict(r) for r in records}
