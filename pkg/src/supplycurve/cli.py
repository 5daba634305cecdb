"""Command-line interface.

Settings come from an optional INI file (``--config``) and flags; flags win
over the file, the file over built-in defaults. Sections:

    [run]      data, out, seed, slots_per_day, horizon_days, start, end,
               min_history_days, workers, demand_fraction, carry_soc,
               cap_multiplier
    [fit]      any FitConfig field
    [forest]   any ForestSettings field (seed defaults to run.seed)
    [storage]  any StorageSpec field (slot_hours follows the data)
    [synth]    num_days, curve_drift_per_day, price_noise_std, capacity_base,
               capacity_noise_std, demand_base, demand_amplitude,
               demand_phase, demand_noise_std, surge_days, surge_factor,
               start_date
    [layout]   date_format, timestamp_format
    [columns]  canonical field = CSV header

Exit status: 0 success, 1 unfittable data or infeasible schedule, 2 bad input.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime as dt
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backtest import HistoryError, revenue_backtest, rolling_forecast, select_test_days
from .curvefit import FitConfig, FitError, evaluate_curve, fit_curve, select_segment_count
from .evaluate import build_report
from .forecast import (CurveForecaster, ForecastSettings, ForestSettings, persistence_baseline,
                       read_forecasts_csv, sensitivity_probe, write_forecasts_csv)
from .marketdata import CANONICAL_COLUMNS, OPTIONAL_FIELDS, CsvLayout, DataError, load_csv, pool_points
from .revenue import InfeasibleScheduleError, StorageSpec
from .synthmarket import DemandProfile, SynthConfig, generate, write_synthetic

log = logging.getLogger("supplycurve")


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, default, name: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True,
                    "false": False, "no": False, "0": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("", "none", "adaptive"):
                return None
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return text


def _section(parser: configparser.ConfigParser, name: str, cls, extra: dict | None = None):
    """Build ``cls`` from ``extra`` defaults overlaid by section ``name``."""
    known = {f.name: f for f in fields(cls)}
    base = cls(**(extra or {}))
    values = dict(extra or {})
    if parser.has_section(name):
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            if not raw.strip():
                continue  # empty means default
            values[key] = _parse_value(raw, getattr(base, key), f"{name}.{key}")
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _date(text: str | None) -> int | None:
    if text in (None, ""):
        return None
    try:
        return dt.date.fromisoformat(text).toordinal()
    except ValueError:
        raise ConfigError(f"not an ISO date: {text!r}") from None


@dataclass
class RunSettings:
    data: str = ""
    out: str = "out"
    seed: int = 0
    slots_per_day: int = 96
    horizon_days: int = 1
    start: str = ""
    end: str = ""
    min_history_days: int = 7
    workers: int = 1
    demand_fraction: float = 0.01
    carry_soc: bool = False
    cap_multiplier: float = 3.0


@dataclass
class SynthSettings:
    num_days: int = 30
    curve_drift_per_day: float = 0.0
    price_noise_std: float = 0.0
    capacity_base: float = 65000.0
    capacity_noise_std: float = 0.0
    demand_base: float = 42000.0
    demand_amplitude: float = 12000.0
    demand_phase: float = 0.0
    demand_noise_std: float = 0.0
    surge_days: str = ""
    surge_factor: float = 1.5
    start_date: str = "2023-04-01"


@dataclass
class RunConfig:
    run: RunSettings
    fit: FitConfig
    forest: ForestSettings
    storage: StorageSpec
    synth: SynthSettings
    layout: CsvLayout = field(default_factory=CsvLayout)

    def forecast_settings(self) -> ForecastSettings:
        return ForecastSettings(self.fit, self.forest, self.run.horizon_days, self.run.cap_multiplier)

    def synth_config(self) -> SynthConfig:
        s = self.synth
        try:
            surges = tuple(int(x) for x in s.surge_days.replace(",", " ").split())
            return SynthConfig(
                num_days=s.num_days, slots_per_day=self.run.slots_per_day,
                curve_drift_per_day=s.curve_drift_per_day,
                demand_profile=DemandProfile(s.demand_base, s.demand_amplitude, s.demand_phase,
                                             s.demand_noise_std),
                capacity_base=s.capacity_base, capacity_noise_std=s.capacity_noise_std,
                price_noise_std=s.price_noise_std, seed=self.run.seed,
                start_date=dt.date.fromisoformat(s.start_date),
                surge_days=surges, surge_factor=s.surge_factor,
            )
        except ValueError as exc:
            raise ConfigError(f"[synth] {exc}") from None

    def to_dict(self) -> dict:
        return {
            "run": dataclasses.asdict(self.run),
            "fit": dataclasses.asdict(self.fit),
            "forest": dataclasses.asdict(self.forest),
            "storage": {k: (None if v == float("inf") else v)
                        for k, v in dataclasses.asdict(self.storage).items()},
            "synth": dataclasses.asdict(self.synth),
            "layout": {"slots_per_day": self.layout.slots_per_day,
                       "date_format": self.layout.date_format,
                       "timestamp_format": self.layout.timestamp_format,
                       "columns": dict(sorted(self.layout.columns.items()))},
        }


def resolve_config(parser: configparser.ConfigParser) -> RunConfig:
    known = {"run", "fit", "forest", "storage", "synth", "layout", "columns"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    run = _section(parser, "run", RunSettings)
    if run.horizon_days < 1:
        raise ConfigError("horizon_days must be >= 1")
    fit = _section(parser, "fit", FitConfig, {"slots_per_day": run.slots_per_day})
    forest = _section(parser, "forest", ForestSettings, {"seed": run.seed})
    storage = _section(parser, "storage", StorageSpec)
    synth = _section(parser, "synth", SynthSettings)

    columns = {c: c for c in CANONICAL_COLUMNS + OPTIONAL_FIELDS}
    if parser.has_section("columns"):
        allowed = set(columns) | {"timestamp"}
        for key, header in parser.items("columns"):
            if key not in allowed:
                raise ConfigError(f"[columns] unknown field {key!r}")
            columns[key] = header
    layout_opts = dict(parser.items("layout")) if parser.has_section("layout") else {}
    extra = set(layout_opts) - {"date_format", "timestamp_format"}
    if extra:
        raise ConfigError(f"[layout] unknown keys {sorted(extra)}")
    try:
        layout = CsvLayout(run.slots_per_day, columns, **layout_opts)
    except ValueError as exc:
        raise ConfigError(f"[layout] {exc}") from None
    return RunConfig(run, fit, forest, storage, synth, layout)


def _flag_overrides(args: argparse.Namespace) -> dict[tuple[str, str], object]:
    table = {
        "data": ("run", "data"), "out": ("run", "out"), "seed": ("run", "seed"),
        "slots": ("run", "slots_per_day"), "horizon": ("run", "horizon_days"),
        "start": ("run", "start"), "end": ("run", "end"), "workers": ("run", "workers"),
        "days": ("synth", "num_days"), "drift": ("synth", "curve_drift_per_day"),
        "noise": ("synth", "price_noise_std"), "surge_days": ("synth", "surge_days"),
    }
    out = {}
    for flag, target in table.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[target] = value
    if getattr(args, "n", None) not in (None, "auto"):
        out[("fit", "n")] = args.n
    return out


def load_config(args: argparse.Namespace) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            parser.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    for (section, key), value in _flag_overrides(args).items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    return resolve_config(parser)


# -- output helpers ---------------------------------------------------------


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1, allow_nan=False) + "\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _iso(day_index: int) -> str:
    return dt.date.fromordinal(day_index).isoformat()


def _load_days(config: RunConfig):
    if not config.run.data:
        raise ConfigError("no dataset given (use --data or [run] data)")
    result = load_csv(config.run.data, config.layout)
    for gap in result.incomplete:
        log.warning("skipping incomplete day %s (%d slots)", _iso(gap.day_index), len(gap.slots))
    if not result.days:
        raise DataError("dataset has no complete day")
    return result.days


def _targets(config: RunConfig, days):
    r = config.run
    return select_test_days(days, _date(r.start), _date(r.end), r.horizon_days, r.min_history_days)


def _model_forecasts(config: RunConfig, days, targets, supplied: str | None):
    """Price forecasts by model name, plus the rolling run if one was made."""
    settings = config.forecast_settings()
    if supplied:
        given = read_forecasts_csv(supplied)
        wanted = {t.day_index for t in targets}
        models = {"supplied": {d: p for d, p in given.items() if d in wanted}}
        if not models["supplied"]:
            raise DataError("supplied forecasts do not cover the test range")
        models["persistence"] = {t.day_index: persistence_baseline(
            days, t.day_index, settings.horizon_days).prices for t in targets}
        return models, None
    run = rolling_forecast(days, targets, settings, config.run.workers)
    return {"curve": run.prices("curve"), "persistence": run.prices("persistence")}, run


# -- commands ---------------------------------------------------------------


def cmd_synth(config: RunConfig, args) -> int:
    synth = config.synth_config()
    days, truths = generate(synth)
    csv_path, truth_path = write_synthetic(days, truths, _out_dir(config))
    print(f"wrote {len(days) * synth.slots_per_day} rows over {len(days)} days to {csv_path}")
    print(f"ground truth curves: {truth_path}")
    return 0


def cmd_fit(config: RunConfig, args) -> int:
    days = _load_days(config)
    end = _date(config.run.end)
    if end is not None:
        days = [d for d in days if d.day_index <= end]
        if not days:
            raise ConfigError("no data on or before the requested end date")
    fit_config = config.fit
    scores = None
    if args.n == "auto":
        pts = pool_points(days[-fit_config.lookback_days:], fit_config.quantity)
        n, scores = select_segment_count(pts, fit_config)
        fit_config = dataclasses.replace(fit_config, n=n)
    result = fit_curve(days, fit_config)
    curve = result.curve
    out = _out_dir(config)
    resolved = config.to_dict()
    resolved["fit"] = dataclasses.asdict(fit_config)
    _write_json(out / "curve.json", {
        "config": resolved,
        "curve": curve.to_dict(),
        "diagnostics": {
            "retained_days": [_iso(d) for d in result.retained_days],
            "dropped_days": [_iso(d) for d in result.dropped_days],
            "num_points": len(result.points),
            "repaired": result.repaired,
            "fell_back": result.fell_back,
            "segment_scores": {str(k): v for k, v in scores.items()} if scores else None,
        },
    })
    x = np.array([p.load_rate for p in result.points])
    fitted = evaluate_curve(curve, x, floor=-np.inf)
    _write_rows(out / "fit_points.csv", ["day", "slot", "load_rate", "price", "weight", "fitted"],
                ([_iso(p.day_index), p.slot_index, repr(p.load_rate), repr(p.price), repr(p.weight),
                  repr(float(f))] for p, f in zip(result.points, fitted)))
    lo, hi = curve.fit_domain
    grid = np.linspace(lo, hi, 201)
    _write_rows(out / "curve_grid.csv", ["load_rate", "price"],
                ([repr(float(a)), repr(float(b))]
                 for a, b in zip(grid, evaluate_curve(curve, grid, floor=-np.inf))))
    bps = ", ".join(f"{b:.4f}" for b in curve.breakpoints) or "none"
    print(f"n={curve.n} breakpoints: {bps} slopes: "
          + ", ".join(f"{s:.2f}" for s in curve.slopes) + f" sse={curve.sse:.6g}")
    return 0


def cmd_forecast(config: RunConfig, args) -> int:
    days = _load_days(config)
    targets = _targets(config, days)
    run = rolling_forecast(days, targets, config.forecast_settings(), config.run.workers)
    out = _out_dir(config)
    ordered = [run.curve[t.day_index] for t in targets]
    write_forecasts_csv(ordered, out / "forecasts.csv")
    write_forecasts_csv([run.persistence[t.day_index] for t in targets], out / "persistence.csv")
    _write_json(out / "forecast.json", {
        "config": config.to_dict(),
        "days": [{"day": _iso(fc.day_index), "capacity_hat": fc.capacity_hat,
                  "curve": fc.curve.to_dict(), "prices": list(fc.prices)} for fc in ordered],
    })
    print(f"forecast {len(ordered)} days {_iso(targets[0].day_index)}..{_iso(targets[-1].day_index)}"
          f" -> {out / 'forecasts.csv'}")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    days = _load_days(config)
    targets = _targets(config, days)
    models, _ = _model_forecasts(config, days, targets, args.forecasts)
    reports = {name: build_report(days, fc, days) for name, fc in models.items()}
    out = _out_dir(config)
    _write_json(out / "eval.json", {"config": config.to_dict(),
                                    "models": {k: r.to_dict() for k, r in reports.items()}})
    header = ["model", "mae", "smape", "rmse", "mae_cs", "cs_days", "num_slots"]
    _write_rows(out / "eval.csv", header,
                ([r.csv_row(name)[h] for h in header] for name, r in reports.items()))
    _write_rows(out / "monthly_mae.csv", ["month", "model", "mae"],
                ([month, name, repr(v)] for name, r in reports.items()
                 for month, v in r.monthly_mae.items()))
    names = list(models)
    by_day = {d.day_index: d for d in days}
    rows = []
    for day_index in sorted(models[names[0]]):
        actual = by_day[day_index].prices
        for h in range(len(actual)):
            rows.append([_iso(day_index), h, repr(float(actual[h]))]
                        + [repr(float(models[m][day_index][h])) for m in names])
    _write_rows(out / "price_series.csv", ["day", "slot", "actual"] + names, rows)
    for name, r in reports.items():
        cs = "n/a" if r.mae_cs is None else f"{r.mae_cs:.4f}"
        print(f"{name}: MAE {r.mae:.4f} sMAPE {r.smape:.4f} RMSE {r.rmse:.4f} "
              f"MAE_CS {cs} ({r.cs_days} days)")
    return 0


def cmd_revenue(config: RunConfig, args) -> int:
    days = _load_days(config)
    targets = _targets(config, days)
    models, _ = _model_forecasts(config, days, targets, args.forecasts)
    out = _out_dir(config)
    payload = {"config": config.to_dict(), "models": {}}
    for name, fc in models.items():
        result = revenue_backtest(days, fc, config.storage, config.run.demand_fraction,
                                  config.run.carry_soc)
        payload["models"][name] = {
            **result.metrics.to_dict(),
            "daily": {_iso(d): m.to_dict() for d, m in sorted(result.daily.items())},
        }
        _write_rows(out / f"schedule_{name}.csv", ["day", "slot", "purchase", "charge", "soc"],
                    ([_iso(d), row["slot"], repr(row["purchase"]), repr(row["charge"]),
                      repr(row["soc"])]
                     for d, sched in sorted(result.schedules.items()) for row in sched.rows()))
        m = result.metrics
        alpha = "n/a" if m.degenerate else f"{m.alpha:.4f}"
        print(f"{name}: C {m.C:.2f} C0 {m.C0:.2f} Ca {m.Ca:.2f} R {m.R:.2f} alpha {alpha}")
    _write_json(out / "revenue.json", payload)
    return 0


def cmd_probe(config: RunConfig, args) -> int:
    days = _load_days(config)
    targets = _targets(config, days)
    forecaster = CurveForecaster(config.forecast_settings())
    pipeline = forecaster.pipeline(days)
    results, monotone = {}, True
    for day in targets:
        results[day.day_index] = sensitivity_probe(pipeline, day, args.mode)
        if args.mode == "double":
            base = np.asarray(pipeline(day, day.forecast_demand))
            doubled = np.asarray(pipeline(day, 2 * np.asarray(day.forecast_demand)))
            monotone &= bool(np.all(doubled >= base))
    values = list(results.values())
    out = _out_dir(config)
    _write_json(out / "probe.json", {
        "config": config.to_dict(), "mode": args.mode,
        "smape": {_iso(d): v for d, v in results.items()},
        "mean_smape": float(np.mean(values)), "min_smape": float(np.min(values)),
        "non_decreasing": monotone if args.mode == "double" else None,
    })
    _write_rows(out / "probe.csv", ["day", "smape"], ([_iso(d), repr(v)] for d, v in results.items()))
    print(f"probe {args.mode}: mean sMAPE {np.mean(values):.4f} over {len(values)} days"
          f" (min {np.min(values):.4f})")
    return 0


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "revenue": cmd_revenue, "probe": cmd_probe}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI settings file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--slots", type=int, choices=(24, 96), help="slots per day")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="canonical market CSV")
    data.add_argument("--end", help="last day (ISO date)")

    rolling = argparse.ArgumentParser(add_help=False, parents=[data])
    rolling.add_argument("--start", help="first test day (ISO date)")
    rolling.add_argument("--horizon", type=int, help="days between last usable data and target")
    rolling.add_argument("--workers", type=int, help="parallel forecast days")

    parser = argparse.ArgumentParser(prog="supplycurve",
                                     description="Supply-curve electricity price forecasting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic market")
    p.add_argument("--days", type=int)
    p.add_argument("--drift", type=float, help="relative curve drift per day")
    p.add_argument("--noise", type=float, help="price noise std")
    p.add_argument("--surge-days", dest="surge_days", help="comma-separated day offsets")

    p = sub.add_parser("fit", parents=[common, data], help="fit the supply curve")
    p.add_argument("--n", default=None,
                   type=lambda s: s if s == "auto" else int(s), help="segments, or 'auto'")

    sub.add_parser("forecast", parents=[common, rolling], help="rolling price forecasts")
    for name, text in (("evaluate", "accuracy report"), ("revenue", "storage revenue report")):
        p = sub.add_parser(name, parents=[common, rolling], help=text)
        p.add_argument("--forecasts", help="score this day,slot,price_hat CSV instead")
    p = sub.add_parser("probe", parents=[common, rolling], help="demand sensitivity probe")
    p.add_argument("--mode", choices=("zero", "double"), default="double")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except (FitError, InfeasibleScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ConfigError, HistoryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
