"""Day-ahead market history: records, CSV ingestion and load rates."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

MAX_LOAD_RATE = 1.5

CANONICAL_COLUMNS = (
    "day",
    "slot",
    "price",
    "demand",
    "supply",
    "capacity",
    "temperature",
    "wind_speed",
    "forecast_demand",
)
REQUIRED_FIELDS = ("price", "demand", "supply", "capacity")
OPTIONAL_FIELDS = (
    "temperature",
    "wind_speed",
    "forecast_demand",
    "forecast_temperature",
    "forecast_wind_speed",
)


class DataError(ValueError):
    """Raised for malformed or physically invalid market data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SlotRecord:
    day_index: int
    slot_index: int
    price: float
    demand: float
    supply: float
    capacity: float
    temperature: float | None = None
    wind_speed: float | None = None

    @property
    def load_rate(self) -> float:
        return self.supply / self.capacity


@dataclass(frozen=True)
class DaySeries:
    """One complete trading day of ``K`` slots.

    ``forecast_demand`` holds the third-party demand forecast for this day,
    ``forecast_weather`` optional per-slot ``(temperature, wind_speed)``
    forecasts.
    """

    day_index: int
    slots: tuple[SlotRecord, ...]
    forecast_demand: tuple[float, ...] | None = None
    forecast_weather: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        slots = tuple(self.slots)
        object.__setattr__(self, "slots", slots)
        if not slots:
            raise DataError(f"day {self.day_index} has no slots")
        for i, rec in enumerate(slots):
            if rec.slot_index != i:
                raise DataError(f"day {self.day_index}: slots must be sorted 0..K-1")
            if rec.day_index != self.day_index:
                raise DataError(f"slot {i} belongs to day {rec.day_index}, not {self.day_index}")
        if self.forecast_demand is not None:
            fd = tuple(float(v) for v in self.forecast_demand)
            if len(fd) != len(slots):
                raise DataError(f"day {self.day_index}: forecast_demand needs {len(slots)} values")
            if any(not v > 0 for v in fd):
                raise DataError(f"day {self.day_index}: forecast_demand must be positive")
            object.__setattr__(self, "forecast_demand", fd)
        if self.forecast_weather is not None:
            fw = tuple((float(t), float(w)) for t, w in self.forecast_weather)
            if len(fw) != len(slots):
                raise DataError(f"day {self.day_index}: forecast_weather needs {len(slots)} values")
            object.__setattr__(self, "forecast_weather", fw)

    @property
    def slots_per_day(self) -> int:
        return len(self.slots)

    @property
    def date(self) -> dt.date:
        return dt.date.fromordinal(self.day_index)

    @cached_property
    def prices(self) -> np.ndarray:
        return np.array([s.price for s in self.slots])

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([s.demand for s in self.slots])

    @cached_property
    def supply(self) -> np.ndarray:
        return np.array([s.supply for s in self.slots])

    @cached_property
    def capacities(self) -> np.ndarray:
        return np.array([s.capacity for s in self.slots])

    @property
    def capacity(self) -> float:
        """Day-level capacity (slots carry a replicated copy)."""
        return float(np.mean(self.capacities))


@dataclass(frozen=True)
class EquilibriumPoint:
    load_rate: float
    price: float
    day_index: int = 0
    slot_index: int = 0
    weight: float = 1.0


class IncompleteDay(NamedTuple):
    day_index: int
    slots: list[SlotRecord]


class LoadResult(NamedTuple):
    days: list[DaySeries]
    incomplete: list[IncompleteDay]


@dataclass(frozen=True)
class CsvLayout:
    """Maps a raw CSV schema onto the canonical fields.

    ``columns`` maps canonical field name to header name. When a
    ``timestamp`` column is mapped, day and slot are derived from it
    instead of from ``day``/``slot`` columns.
    """

    slots_per_day: int = 96
    columns: dict[str, str] = field(default_factory=lambda: {c: c for c in CANONICAL_COLUMNS + OPTIONAL_FIELDS})
    date_format: str = "%Y-%m-%d"
    timestamp_format: str = "%Y-%m-%d %H:%M"

    def __post_init__(self):
        if self.slots_per_day < 1 or 1440 % self.slots_per_day:
            raise ValueError(f"slots_per_day must divide 1440, got {self.slots_per_day}")


def _parse_float(raw: str, name: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"cannot parse {name}={raw!r} as a number", line) from None
    if not math.isfinite(value):
        raise DataError(f"{name} is not finite", line)
    return value


def _optional_float(row: dict, header: str | None, name: str, line: int) -> float | None:
    if header is None:
        return None
    raw = (row.get(header) or "").strip()
    if raw == "":
        return None
    return _parse_float(raw, name, line)


def load_csv(path: str | Path, layout: CsvLayout | None = None) -> LoadResult:
    """Read market history and group it into complete days.

    Days missing any slot are returned in ``LoadResult.incomplete`` and
    never padded.
    """
    layout = layout or CsvLayout()
    cols = layout.columns
    k = layout.slots_per_day
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    by_day: dict[int, dict[int, tuple[SlotRecord, dict]]] = {}
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            return LoadResult([], [])
        headers = set(reader.fieldnames)
        use_ts = "timestamp" in cols
        needed = ["timestamp"] if use_ts else ["day", "slot"]
        needed += list(REQUIRED_FIELDS)
        for name in needed:
            if name not in cols:
                raise DataError(f"column mapping lacks required field {name!r}")
            if cols[name] not in headers:
                raise DataError(f"header {cols[name]!r} (field {name!r}) not found in {path}", 1)
        optional = {name: cols.get(name) if cols.get(name) in headers else None
                    for name in OPTIONAL_FIELDS}

        for row in reader:
            line = reader.line_num
            if None in row:
                raise DataError("row has more fields than the header", line)
            if use_ts:
                raw = row[cols["timestamp"]].strip()
                try:
                    stamp = dt.datetime.strptime(raw, layout.timestamp_format)
                except ValueError:
                    raise DataError(f"unparseable timestamp {raw!r}", line) from None
                day = stamp.date().toordinal()
                slot = (stamp.hour * 60 + stamp.minute) // (1440 // k)
            else:
                raw = (row[cols["day"]] or "").strip()
                try:
                    day = dt.datetime.strptime(raw, layout.date_format).date().toordinal()
                except ValueError:
                    raise DataError(f"unparseable date {raw!r}", line) from None
                raw_slot = (row[cols["slot"]] or "").strip()
                try:
                    slot = int(raw_slot)
                except ValueError:
                    raise DataError(f"slot {raw_slot!r} is not an integer", line) from None
            if not 0 <= slot < k:
                raise DataError(f"slot {slot} outside [0, {k})", line)

            vals = {}
            for name in REQUIRED_FIELDS:
                raw = (row[cols[name]] or "").strip()
                if raw == "":
                    raise DataError(f"missing value for {name}", line)
                vals[name] = _parse_float(raw, name, line)
            for name in ("supply", "capacity", "demand"):
                if vals[name] <= 0:
                    raise DataError(f"non-positive {name} {vals[name]}", line)
            extra = {name: _optional_float(row, optional[name], name, line)
                     for name in OPTIONAL_FIELDS}

            rec = SlotRecord(day, slot, vals["price"], vals["demand"], vals["supply"],
                             vals["capacity"], extra["temperature"], extra["wind_speed"])
            day_slots = by_day.setdefault(day, {})
            if slot in day_slots:
                raise DataError(f"duplicate (day, slot) = ({dt.date.fromordinal(day)}, {slot})", line)
            day_slots[slot] = (rec, extra)

    days: list[DaySeries] = []
    incomplete: list[IncompleteDay] = []
    for day in sorted(by_day):
        entries = by_day[day]
        ordered = [entries[s] for s in sorted(entries)]
        if len(entries) != k:
            incomplete.append(IncompleteDay(day, [rec for rec, _ in ordered]))
            continue
        fd = [extra["forecast_demand"] for _, extra in ordered]
        ft = [extra["forecast_temperature"] for _, extra in ordered]
        fw = [extra["forecast_wind_speed"] for _, extra in ordered]
        weather = None
        if all(v is not None for v in ft + fw):
            weather = tuple(zip(ft, fw))
        days.append(DaySeries(
            day_index=day,
            slots=tuple(rec for rec, _ in ordered),
            forecast_demand=tuple(fd) if all(v is not None for v in fd) else None,
            forecast_weather=weather,
        ))
    return LoadResult(days, incomplete)


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_csv(days: Iterable[DaySeries], path: str | Path) -> None:
    """Write days in the canonical schema (shortest round-trip float text)."""
    days = list(days)
    with_weather = any(d.forecast_weather is not None for d in days)
    header = list(CANONICAL_COLUMNS)
    if with_weather:
        header += ["forecast_temperature", "forecast_wind_speed"]
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for day in days:
            iso = day.date.isoformat()
            for i, s in enumerate(day.slots):
                row = [iso, str(s.slot_index), _fmt(s.price), _fmt(s.demand), _fmt(s.supply),
                       _fmt(s.capacity), _fmt(s.temperature), _fmt(s.wind_speed),
                       _fmt(day.forecast_demand[i]) if day.forecast_demand else ""]
                if with_weather:
                    fw = day.forecast_weather[i] if day.forecast_weather else (None, None)
                    row += [_fmt(fw[0]), _fmt(fw[1])]
                writer.writerow(row)


def compute_load_rates(day: DaySeries, quantity: str = "supply") -> list[EquilibriumPoint]:
    """Turn each slot of ``day`` into a (load rate, price) equilibrium point.

    ``quantity`` picks which cleared quantity feeds the axis: ``"supply"``
    or ``"demand"``.
    """
    if quantity not in ("supply", "demand"):
        raise ValueError(f"quantity must be 'supply' or 'demand', got {quantity!r}")
    points = []
    for s in day.slots:
        if s.capacity <= 0:
            raise DataError(f"day {day.date}: non-positive capacity {s.capacity}")
        lr = getattr(s, quantity) / s.capacity
        if not 0 < lr <= MAX_LOAD_RATE:
            raise DataError(f"corrupt load rate {lr:.4g} on {day.date} slot {s.slot_index}")
        points.append(EquilibriumPoint(lr, s.price, s.day_index, s.slot_index, 1.0))
    return points


def pool_points(days: Sequence[DaySeries], quantity: str = "supply") -> list[EquilibriumPoint]:
    return [p for day in days for p in compute_load_rates(day, quantity)]
