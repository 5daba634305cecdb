"""Day-ahead electricity price forecasting from a continuous piecewise-linear supply curve."""
from .curvefit import FitConfig, SupplyCurve, evaluate_curve, fit_curve, fit_supply_curve
from .forecast import CurveForecaster, ForecastSettings, forecast_prices, persistence_baseline
from .marketdata import DaySeries, SlotRecord, load_csv
from .revenue import StorageSpec, optimal_schedule, revenue_metrics

__all__ = [
    "CurveForecaster", "DaySeries", "FitConfig", "ForecastSettings", "SlotRecord", "StorageSpec",
    "SupplyCurve", "evaluate_curve", "fit_curve", "fit_supply_curve", "forecast_prices",
    "load_csv", "optimal_schedule", "persistence_baseline", "revenue_metrics",
]
