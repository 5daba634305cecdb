"""Continuous piecewise-linear supply curves in the load-rate axis.

The inner problem (breakpoints frozen) is a weighted linear least-squares
fit in the hinge basis ``1, x, max(0, x - b_1), ..., max(0, x - b_{n-1})``,
so every fitted curve is continuous by construction. Breakpoints are found
by an exhaustive search over ordered placements on a quantile grid followed
by a bounded Nelder-Mead refinement inside the winning cell.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .marketdata import DaySeries, EquilibriumPoint, compute_load_rates, pool_points

log = logging.getLogger(__name__)

CONTINUITY_RTOL = 1e-6


class FitError(RuntimeError):
    pass


class UnfittableError(FitError):
    pass


class RankDeficientError(FitError):
    pass


class UnrepairableFitError(FitError):
    pass


class IrregularDaysWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SupplyCurve:
    """Continuous ``n``-segment piecewise-linear map from load rate to price.

    Segment ``i`` covers ``(breakpoints[i-1], breakpoints[i]]`` and prices
    as ``slopes[i] * x + intercepts[i]``.
    """

    n: int
    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]
    fit_domain: tuple[float, float]
    sse: float = 0.0

    def __post_init__(self):
        for name in ("breakpoints", "slopes", "intercepts", "fit_domain"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "sse", float(self.sse))
        n = self.n
        if n < 1 or len(self.slopes) != n or len(self.intercepts) != n or len(self.breakpoints) != n - 1:
            raise ValueError(f"inconsistent curve shape for n={n}")
        lo, hi = self.fit_domain
        if not lo <= hi:
            raise ValueError(f"bad fit_domain {self.fit_domain}")
        bps = self.breakpoints
        if any(b1 >= b2 for b1, b2 in zip(bps, bps[1:])):
            raise ValueError(f"breakpoints must be strictly increasing: {bps}")
        if bps and not (lo < bps[0] and bps[-1] < hi):
            raise ValueError(f"breakpoints {bps} not inside fit_domain {self.fit_domain}")
        for i, b in enumerate(bps):
            left = self.slopes[i] * b + self.intercepts[i]
            right = self.slopes[i + 1] * b + self.intercepts[i + 1]
            if abs(left - right) > CONTINUITY_RTOL * max(1.0, abs(left)):
                raise ValueError(f"curve discontinuous at breakpoint {b}: {left} vs {right}")

    @classmethod
    def from_anchor(cls, breakpoints, slopes, anchor_price, fit_domain, sse=0.0) -> "SupplyCurve":
        """Build a curve from slopes and its price at ``fit_domain[0]``."""
        lo = fit_domain[0]
        intercepts = [anchor_price - slopes[0] * lo]
        for i, b in enumerate(breakpoints):
            value = slopes[i] * b + intercepts[i]
            intercepts.append(value - slopes[i + 1] * b)
        return cls(len(slopes), tuple(breakpoints), tuple(slopes), tuple(intercepts),
                   tuple(fit_domain), sse)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "breakpoints": list(self.breakpoints),
            "slopes": list(self.slopes),
            "intercepts": list(self.intercepts),
            "fit_domain": list(self.fit_domain),
            "sse": self.sse,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SupplyCurve":
        return cls(int(data["n"]), data["breakpoints"], data["slopes"], data["intercepts"],
                   data["fit_domain"], data.get("sse", 0.0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SupplyCurve":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class FitConfig:
    """Knobs for selecting data and fitting the curve.

    ``day_deviation_threshold=None`` means the adaptive rule: 1.5 times the
    median per-day fit MAE of the candidate days.
    """

    n: int = 3
    lookback_days: int = 7
    slots_per_day: int = 96
    day_deviation_threshold: float | None = None
    shape_deviation_threshold: float = 0.5
    outer_segment_weight: float = 5.0
    min_slope: float = 0.0
    breakpoint_grid: int = 30
    refine_iters: int = 200
    refine_starts: int = 3
    min_segment_points: int = 2
    price_floor: float = 0.0
    quantity: str = "supply"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.lookback_days < 1:
            raise ValueError("lookback_days must be >= 1")
        if self.outer_segment_weight < 1:
            raise ValueError("outer_segment_weight must be >= 1")
        if self.min_slope < 0:
            raise ValueError("min_slope must be >= 0")
        if self.breakpoint_grid < self.n + 1:
            raise ValueError("breakpoint_grid must be >= n + 1")
        if self.refine_iters < 0 or self.refine_starts < 1 or self.min_segment_points < 0:
            raise ValueError("refine_iters >= 0, refine_starts >= 1, min_segment_points >= 0 required")
        if self.day_deviation_threshold is not None and not self.day_deviation_threshold > 0:
            raise ValueError("day_deviation_threshold must be positive")
        if self.quantity not in ("supply", "demand"):
            raise ValueError("quantity must be 'supply' or 'demand'")


def as_arrays(points: Sequence[EquilibriumPoint]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.fromiter((p.load_rate for p in points), float, len(points))
    y = np.fromiter((p.price for p in points), float, len(points))
    w = np.fromiter((p.weight for p in points), float, len(points))
    return x, y, w


def hinge_basis(x: np.ndarray, breakpoints: Sequence[float]) -> np.ndarray:
    cols = [np.ones_like(x), x] + [np.maximum(x - b, 0.0) for b in breakpoints]
    return np.column_stack(cols)


def _decompose(beta: np.ndarray, breakpoints: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment slopes/intercepts from hinge-basis coefficients."""
    hinge = beta[2:]
    slopes = beta[1] + np.concatenate(([0.0], np.cumsum(hinge)))
    shifts = np.concatenate(([0.0], np.cumsum(hinge * np.asarray(breakpoints, float))))
    intercepts = beta[0] - shifts
    return slopes, intercepts


def _solve(x, y, w, breakpoints):
    basis = hinge_basis(x, breakpoints)
    sw = np.sqrt(w)
    beta, _, _, sv = np.linalg.lstsq(basis * sw[:, None], y * sw, rcond=None)
    if sv[-1] <= sv[0] * 1e-10:
        raise RankDeficientError(f"hinge basis rank-deficient for breakpoints {list(breakpoints)}")
    resid = y - basis @ beta
    return beta, float(np.sum(w * resid * resid))


def fit_fixed_breakpoints(points: Sequence[EquilibriumPoint], breakpoints: Sequence[float]):
    """Weighted least squares with the breakpoints held fixed.

    Returns ``(slopes, intercepts, sse)``; raises ``RankDeficientError`` when
    the data cannot determine all ``n + 1`` hinge coefficients.
    """
    bps = [float(b) for b in breakpoints]
    if any(b1 >= b2 for b1, b2 in zip(bps, bps[1:])):
        raise ValueError("breakpoints must be strictly increasing")
    if len(points) < len(bps) + 2:
        raise RankDeficientError(f"{len(points)} points cannot fit {len(bps) + 2} parameters")
    x, y, w = as_arrays(points)
    beta, sse = _solve(x, y, w, bps)
    slopes, intercepts = _decompose(beta, bps)
    return slopes, intercepts, sse


def breakpoint_grid(x: np.ndarray, size: int) -> np.ndarray:
    """Interior empirical quantiles of ``x`` used as candidate breakpoints."""
    levels = np.arange(1, size + 1) / (size + 1)
    grid = np.unique(np.quantile(x, levels))
    return grid[(grid > x.min()) & (grid < x.max())]


def _segment_counts(x_sorted: np.ndarray, breakpoints) -> np.ndarray:
    edges = np.searchsorted(x_sorted, breakpoints, side="right")
    return np.diff(np.concatenate(([0], edges, [len(x_sorted)])))


class _Problem:
    """Weighted point set plus the feasibility rule shared by both search stages."""

    def __init__(self, x, y, w, min_segment_points):
        self.x, self.y, self.w = x, y, w
        self.x_sorted = np.sort(x[w > 0])
        self.min_points = min_segment_points

    def feasible(self, bps) -> bool:
        if any(b1 >= b2 for b1, b2 in zip(bps, bps[1:])):
            return False
        return bool(np.all(_segment_counts(self.x_sorted, bps) >= self.min_points))

    def sse(self, bps) -> float:
        if not self.feasible(bps):
            return math.inf
        try:
            return _solve(self.x, self.y, self.w, bps)[1]
        except RankDeficientError:
            return math.inf


def coarse_search(points: Sequence[EquilibriumPoint], config: FitConfig):
    """Exhaustive search over ordered placements on the quantile grid.

    Returns ``(breakpoints, sse, grid)``. Ties keep the lexicographically
    smallest placement.
    """
    x, y, w = as_arrays(points)
    bps, sse, grid, _ = _coarse(_Problem(x, y, w, config.min_segment_points), config)
    return bps, sse, grid


def _coarse(problem: _Problem, config: FitConfig, keep: int = 1):
    grid = breakpoint_grid(problem.x[problem.w > 0], config.breakpoint_grid)
    m = config.n - 1
    ranked = []
    for idx in itertools.combinations(range(len(grid)), m):
        sse = problem.sse(grid[list(idx)])
        if sse < math.inf:
            ranked.append((sse, idx))
    if not ranked:
        raise UnfittableError(f"no feasible placement of {m} breakpoints on {len(grid)} grid positions")
    # stable sort keeps lexicographic order among equal sse
    ranked.sort(key=lambda item: item[0])
    best_sse, best_idx = ranked[0]
    starts = [(tuple(float(grid[i]) for i in idx), sse, idx) for sse, idx in ranked[:keep]]
    return tuple(float(grid[i]) for i in best_idx), best_sse, grid, starts


def _refine(problem: _Problem, grid, best_idx, start, start_sse, iters):
    lo, hi = problem.x_sorted[0], problem.x_sorted[-1]
    bounds = []
    for i in best_idx:
        left = grid[i - 1] if i > 0 else lo
        right = grid[i + 1] if i + 1 < len(grid) else hi
        bounds.append((float(left), float(right)))
    x0 = np.array(start)
    simplex = [x0]
    for k, (left, right) in enumerate(bounds):
        step = 0.25 * min(right - x0[k], x0[k] - left)
        vertex = x0.copy()
        vertex[k] += step if step > 0 else 0.25 * (right - left)
        simplex.append(vertex)
    res = minimize(
        problem.sse, x0, method="Nelder-Mead", bounds=bounds,
        options={"maxiter": iters, "initial_simplex": np.array(simplex),
                 "xatol": 1e-9, "fatol": 1e-12 * max(1.0, start_sse)},
    )
    cand = tuple(float(v) for v in np.atleast_1d(res.x))
    cand_sse = problem.sse(cand)
    if cand_sse < start_sse:
        return cand, cand_sse
    return start, start_sse


def _polish(problem: _Problem, bps, sse, rounds: int = 3):
    """Move breakpoints to where independently fitted segment lines cross.

    On exact piecewise-linear data this lands on the true breakpoints up to
    rounding, which the simplex search only approaches to within its
    tolerance. A move is kept only if it lowers the sse.
    """
    x, y, w = problem.x, problem.y, problem.w
    for _ in range(rounds):
        seg = np.searchsorted(np.asarray(bps), x, side="left")
        lines = []
        for i in range(len(bps) + 1):
            mask = (seg == i) & (w > 0)
            if np.unique(x[mask]).size < 2:
                return bps, sse
            lines.append(_solve(x[mask], y[mask], w[mask], [])[0])
        cand = []
        for (b0, s0), (b1, s1) in zip(lines, lines[1:]):
            if s0 == s1:
                return bps, sse
            cand.append(float((b1 - b0) / (s0 - s1)))
        cand_sse = problem.sse(cand)
        if not cand_sse < sse:
            return bps, sse
        bps, sse = tuple(cand), cand_sse
    return bps, sse


def _linear_fit(x, y, w) -> np.ndarray:
    if np.ptp(x[w > 0]) == 0:
        raise UnfittableError("all load rates are equal")
    return _solve(x, y, w, [])[0]


def fit_supply_curve(points: Sequence[EquilibriumPoint], config: FitConfig = FitConfig()) -> SupplyCurve:
    """Least-squares continuous ``config.n``-segment fit of price on load rate."""
    n = config.n
    if len(points) < n + 2:
        raise UnfittableError(f"need at least {n + 2} points, got {len(points)}")
    x, y, w = as_arrays(points)
    active = x[w > 0]
    if len(np.unique(active)) < max(n, 2):
        raise UnfittableError("degenerate load-rate spread")
    domain = (float(active.min()), float(active.max()))
    if n == 1:
        beta = _linear_fit(x, y, w)
        sse = float(np.sum(w * (y - beta[0] - beta[1] * x) ** 2))
        return SupplyCurve(1, (), (beta[1],), (beta[0],), domain, sse)

    problem = _Problem(x, y, w, config.min_segment_points)
    bps, sse, grid, starts = _coarse(problem, config, keep=config.refine_starts)
    if config.refine_iters > 0:
        for start, start_sse, idx in starts:
            cand, cand_sse = _refine(problem, grid, idx, start, start_sse, config.refine_iters)
            if cand_sse < sse:
                bps, sse = cand, cand_sse
    bps, sse = _polish(problem, bps, sse)
    beta, sse = _solve(x, y, w, bps)
    slopes, intercepts = _decompose(beta, bps)
    return SupplyCurve(n, bps, tuple(slopes), tuple(intercepts), domain, sse)


def evaluate_curve(curve: SupplyCurve, load_rate, floor: float = 0.0):
    """Price at ``load_rate`` (scalar or array), floored at ``floor``.

    Outside the fit domain the terminal segments extrapolate linearly.
    """
    x = np.asarray(load_rate, dtype=float)
    seg = np.searchsorted(np.asarray(curve.breakpoints), x, side="left")
    value = np.asarray(curve.slopes)[seg] * x + np.asarray(curve.intercepts)[seg]
    value = np.maximum(value, floor)
    return float(value) if value.ndim == 0 else value


def curve_sse(curve: SupplyCurve, points: Sequence[EquilibriumPoint]) -> float:
    x, y, w = as_arrays(points)
    resid = y - evaluate_curve(curve, x, floor=-math.inf)
    return float(np.sum(w * resid * resid))


def curve_mae(curve: SupplyCurve, points: Sequence[EquilibriumPoint]) -> float:
    x, y, _ = as_arrays(points)
    return float(np.mean(np.abs(y - evaluate_curve(curve, x, floor=-math.inf))))


@lru_cache(maxsize=4096)
def _fit_day_cached(day: DaySeries, config: FitConfig):
    points = compute_load_rates(day, config.quantity)
    try:
        curve = fit_supply_curve(points, config)
    except FitError:
        return None, math.inf
    return curve, curve_mae(curve, points)


def fit_day(day: DaySeries, config: FitConfig) -> SupplyCurve | None:
    """Per-day curve (``None`` when the day alone is unfittable); memoised."""
    return _fit_day_cached(day, config)[0]


def _fit_days(days, config, max_workers):
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            return list(pool.map(lambda d: _fit_day_cached(d, config), days))
    return [_fit_day_cached(d, config) for d in days]


def _middle_slope(curve: SupplyCurve) -> float:
    return curve.slopes[curve.n // 2]


def select_recent_days(days: Sequence[DaySeries], config: FitConfig = FitConfig(),
                       max_workers: int | None = None) -> list[DaySeries]:
    """Most recent run of days whose curve shape matches the latest day.

    Scans backwards through the last ``lookback_days`` days and truncates at
    the first day whose middle-segment slope deviates from the reference
    (most recent fittable day) by more than ``shape_deviation_threshold``
    relative. Days that cannot be fitted alone carry no shape evidence and
    are kept.
    """
    if not days:
        raise ValueError("select_recent_days needs at least one day")
    window = list(days[-config.lookback_days:])
    fits = _fit_days(window, config, max_workers)
    ref_pos = next((i for i in range(len(window) - 1, -1, -1) if fits[i][0] is not None), None)
    if ref_pos is None:
        return window[-1:]
    ref = _middle_slope(fits[ref_pos][0])
    start = 0
    for i in range(ref_pos - 1, -1, -1):
        curve = fits[i][0]
        if curve is None:
            continue
        change = abs(_middle_slope(curve) - ref) / max(abs(ref), 1e-12)
        if change > config.shape_deviation_threshold:
            start = i + 1
            break
    return window[start:]


def filter_irregular_days(days: Sequence[DaySeries], config: FitConfig = FitConfig(),
                          max_workers: int | None = None) -> list[DaySeries]:
    """Drop days whose own curve fits their points with MAE above the threshold.

    If every day would be dropped, the day with the smallest MAE is returned
    and an ``IrregularDaysWarning`` is emitted.
    """
    if not days:
        raise ValueError("filter_irregular_days needs at least one day")
    days = list(days)
    maes = np.array([m for _, m in _fit_days(days, config, max_workers)])
    tau = config.day_deviation_threshold
    if tau is None:
        finite = maes[np.isfinite(maes)]
        scale = np.median(np.abs(np.concatenate([d.prices for d in days])))
        tau = max(1.5 * float(np.median(finite)) if finite.size else 0.0, 1e-6 * max(1.0, scale))
    keep = [d for d, m in zip(days, maes) if m <= tau]
    if not keep:
        best = int(np.argmin(maes))
        warnings.warn(f"all {len(days)} days exceed MAE threshold {tau:.4g}; keeping "
                      f"{days[best].date}", IrregularDaysWarning, stacklevel=2)
        return [days[best]]
    dropped = [d.date.isoformat() for d, m in zip(days, maes) if m > tau]
    if dropped:
        log.info("dropped irregular days %s (threshold %.4g)", dropped, tau)
    return keep


def assign_weights(points: Sequence[EquilibriumPoint], provisional: SupplyCurve,
                   config: FitConfig = FitConfig()) -> list[EquilibriumPoint]:
    """Up-weight points outside ``[first breakpoint, last breakpoint]``."""
    if provisional.n < 2:
        raise ValueError("assign_weights needs a curve with at least one breakpoint")
    lo, hi = provisional.breakpoints[0], provisional.breakpoints[-1]
    outer = config.outer_segment_weight
    return [replace(p, weight=outer if (p.load_rate < lo or p.load_rate > hi) else 1.0)
            for p in points]


def repair_curve(curve: SupplyCurve, config: FitConfig = FitConfig()) -> SupplyCurve:
    """Replace too-shallow outer slopes of a 3-segment curve by the middle slope.

    The replaced segment keeps its value at the adjoining breakpoint, so the
    curve stays continuous; the middle segment is never touched.
    """
    if curve.n != 3:
        raise ValueError(f"repair is defined for 3-segment curves, got n={curve.n}")
    floor = config.min_slope
    w1, w2, w3 = curve.slopes
    b1, b2, b3 = curve.intercepts
    if w2 < floor:
        raise UnrepairableFitError(f"unrepairable fit: middle slope {w2:.4g} < {floor}")
    if w1 >= floor and w3 >= floor:
        return curve
    bp1, bp2 = curve.breakpoints
    if w1 < floor:
        w1, b1 = w2, (w1 * bp1 + b1) - w2 * bp1
    if w3 < floor:
        w3, b3 = w2, (w3 * bp2 + b3) - w2 * bp2
    return replace(curve, slopes=(w1, w2, w3), intercepts=(b1, b2, b3))


@dataclass(frozen=True)
class CurveFit:
    """Outcome of the full fitting pipeline, with diagnostics."""

    curve: SupplyCurve
    points: tuple[EquilibriumPoint, ...]
    retained_days: tuple[int, ...]
    dropped_days: tuple[int, ...]
    initial: SupplyCurve
    repaired: bool = False
    fell_back: bool = False


def fit_curve(days: Sequence[DaySeries], config: FitConfig = FitConfig(),
              max_workers: int | None = None) -> CurveFit:
    """Select days, drop irregular ones, fit, reweight, refit and repair."""
    recent = select_recent_days(days, config, max_workers)
    kept = filter_irregular_days(recent, config, max_workers)
    kept_ids = {d.day_index for d in kept}
    points = pool_points(kept, config.quantity)
    initial = fit_supply_curve(points, config)
    curve = initial
    if config.n >= 2 and config.outer_segment_weight != 1:
        points = assign_weights(points, initial, config)
        curve = fit_supply_curve(points, config)

    repaired = fell_back = False
    try:
        if curve.n == 3:
            fixed = repair_curve(curve, config)
            repaired = fixed != curve
            curve = fixed
        elif min(curve.slopes) < config.min_slope:
            raise UnrepairableFitError(f"slopes {curve.slopes} below {config.min_slope}")
    except UnrepairableFitError as exc:
        log.warning("%s; falling back to a single segment", exc)
        points = [replace(p, weight=1.0) for p in points]
        curve = fit_supply_curve(points, replace(config, n=1))
        fell_back = True
    if repaired:
        curve = replace(curve, sse=curve_sse(curve, points))
    return CurveFit(
        curve=curve,
        points=tuple(points),
        retained_days=tuple(d.day_index for d in kept),
        dropped_days=tuple(d.day_index for d in recent if d.day_index not in kept_ids),
        initial=initial,
        repaired=repaired,
        fell_back=fell_back,
    )


def segment_count_score(sse: float, n: int, num_points: int) -> float:
    """BIC-style score with a doubled parameter penalty ``2 * (2n) * ln N``."""
    return num_points * math.log(max(sse, 1e-300) / num_points) + 2 * (2 * n) * math.log(num_points)


def select_segment_count(points: Sequence[EquilibriumPoint], config: FitConfig = FitConfig(),
                         candidates: Sequence[int] = (1, 2, 3, 4)) -> tuple[int, dict[int, float]]:
    """Pick ``n`` from ``candidates`` by minimal penalised score."""
    scores = {}
    for n in candidates:
        cfg = replace(config, n=n, breakpoint_grid=max(config.breakpoint_grid, n + 1))
        try:
            curve = fit_supply_curve(points, cfg)
        except FitError:
            continue
        scores[n] = segment_count_score(curve.sse, n, len(points))
    if not scores:
        raise UnfittableError("no candidate segment count could be fitted")
    return min(scores, key=lambda k: (scores[k], k)), scores
