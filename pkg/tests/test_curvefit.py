import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import START, daily_load_rates, make_day
from supplycurve.curvefit import (FitConfig, IrregularDaysWarning, RankDeficientError, SupplyCurve,
                                  UnfittableError, UnrepairableFitError, assign_weights,
                                  breakpoint_grid, coarse_search, curve_sse, evaluate_curve,
                                  filter_irregular_days, fit_curve, fit_fixed_breakpoints,
                                  fit_supply_curve, repair_curve, segment_count_score,
                                  select_recent_days, select_segment_count)
from supplycurve.marketdata import EquilibriumPoint, pool_points
from supplycurve.synthmarket import DemandProfile, SynthConfig, generate


def points_from(x, y, w=None):
    w = np.ones(len(x)) if w is None else w
    return [EquilibriumPoint(float(a), float(b), 0, i, float(c))
            for i, (a, b, c) in enumerate(zip(x, y, w))]


def explicit_basis(x, bps):
    rows = []
    for xi in x:
        row = [1.0, xi]
        for b in bps:
            row.append(xi - b if xi > b else 0.0)
        rows.append(row)
    return np.array(rows)


# -- fixed breakpoints -------------------------------------------------------


def test_exact_points_are_interpolated(three_segment):
    x = np.linspace(0.46, 0.84, 10)
    pts = points_from(x, evaluate_curve(three_segment, x))
    slopes, intercepts, sse = fit_fixed_breakpoints(pts, three_segment.breakpoints)
    np.testing.assert_allclose(slopes, three_segment.slopes, rtol=1e-9)
    np.testing.assert_allclose(intercepts, three_segment.intercepts, rtol=1e-9)
    assert sse <= 1e-12


def test_doubling_weights_doubles_sse(three_segment):
    rng = np.random.default_rng(1)
    x = rng.uniform(0.45, 0.85, 40)
    y = evaluate_curve(three_segment, x) + rng.normal(0, 3, 40)
    w = rng.uniform(0.5, 2, 40)
    s1, b1, e1 = fit_fixed_breakpoints(points_from(x, y, w), three_segment.breakpoints)
    s2, b2, e2 = fit_fixed_breakpoints(points_from(x, y, 2 * w), three_segment.breakpoints)
    np.testing.assert_allclose(s1, s2, rtol=1e-10)
    np.testing.assert_allclose(b1, b2, rtol=1e-10)
    assert e2 == pytest.approx(2 * e1, rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_fixed_fit_matches_normal_equations(seed, three_segment):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.45, 0.85, 50)
    y = evaluate_curve(three_segment, x) + rng.normal(0, 5, 50)
    w = rng.uniform(0.2, 5, 50)
    bps = (0.57, 0.73)
    B = explicit_basis(x, bps)
    beta = np.linalg.solve(B.T @ (w[:, None] * B), B.T @ (w * y))
    resid = y - B @ beta
    oracle_sse = float(np.sum(w * resid ** 2))
    slopes, intercepts, sse = fit_fixed_breakpoints(points_from(x, y, w), bps)
    assert sse == pytest.approx(oracle_sse, rel=1e-10)
    assert slopes[0] == pytest.approx(beta[1], rel=1e-9)
    assert slopes[2] == pytest.approx(beta[1] + beta[2] + beta[3], rel=1e-9)


def test_rank_deficient_placement():
    x = np.linspace(0.5, 0.6, 10)
    with pytest.raises(RankDeficientError):
        fit_fixed_breakpoints(points_from(x, x), (0.7, 0.8))


# -- full fits ---------------------------------------------------------------


def test_noiseless_day_recovers_truth():
    days, truths = generate(SynthConfig(num_days=1, seed=0))
    curve = fit_supply_curve(pool_points(days))
    truth = truths[0]
    np.testing.assert_allclose(curve.breakpoints, truth.breakpoints, atol=0.01)
    np.testing.assert_allclose(curve.slopes, truth.slopes, rtol=0.01)
    assert curve.sse <= 1e-8


def test_single_segment_is_closed_form():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.4, 0.9, 30)
    y = 80 * x + rng.normal(0, 4, 30)
    w = rng.uniform(0.5, 3, 30)
    xm, ym = np.average(x, weights=w), np.average(y, weights=w)
    slope = np.sum(w * (x - xm) * (y - ym)) / np.sum(w * (x - xm) ** 2)
    curve = fit_supply_curve(points_from(x, y, w), FitConfig(n=1))
    assert curve.slopes[0] == pytest.approx(slope, rel=1e-10)
    assert curve.intercepts[0] == pytest.approx(ym - slope * xm, rel=1e-10)
    assert curve.breakpoints == ()


def test_unfittable_inputs():
    with pytest.raises(UnfittableError):
        fit_supply_curve(points_from([0.5, 0.6], [1, 2]))
    with pytest.raises(UnfittableError, match="spread"):
        fit_supply_curve(points_from([0.5] * 10, range(10)))


def test_coarse_stage_matches_exhaustive_enumeration():
    rng = np.random.default_rng(7)
    x = np.sort(rng.uniform(0.4, 0.9, 12))
    y = 40 + 100 * np.maximum(x - 0.6, 0) ** 1.5 * 10 + rng.normal(0, 1, 12)
    config = FitConfig(breakpoint_grid=15, min_segment_points=0)
    pts = points_from(x, y)
    _, sse, grid = coarse_search(pts, config)
    best = math.inf
    for b1, b2 in itertools.combinations(grid, 2):
        B = explicit_basis(x, (b1, b2))
        if np.linalg.matrix_rank(B) < 4:
            continue
        beta = np.linalg.lstsq(B, y, rcond=None)[0]
        best = min(best, float(np.sum((y - B @ beta) ** 2)))
    assert sse == best


def test_objective_consistency_and_continuity():
    days, _ = generate(SynthConfig(num_days=2, price_noise_std=3, curve_drift_per_day=0.05, seed=2))
    pts = pool_points(days)
    curve = fit_supply_curve(pts)
    assert curve.sse == pytest.approx(curve_sse(curve, pts), rel=1e-8)
    for i, b in enumerate(curve.breakpoints):
        left = curve.slopes[i] * b + curve.intercepts[i]
        right = curve.slopes[i + 1] * b + curve.intercepts[i + 1]
        assert abs(left - right) <= 1e-6 * max(1, abs(left))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4))
def test_more_segments_never_fit_worse(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.3, 1.0, 40)
    y = rng.normal(50, 20, 40) + 60 * x
    pts = points_from(x, y)
    line = fit_supply_curve(pts, FitConfig(n=1))
    curve = fit_supply_curve(pts, FitConfig(n=n, breakpoint_grid=12))
    assert curve.sse <= line.sse * (1 + 1e-12)


def test_fit_is_deterministic():
    days, _ = generate(SynthConfig(num_days=2, price_noise_std=2, seed=9))
    pts = pool_points(days)
    assert fit_supply_curve(pts) == fit_supply_curve(list(pts))


def test_grid_is_interior_quantiles():
    x = np.arange(1, 101, dtype=float)
    grid = breakpoint_grid(x, 9)
    assert len(grid) == 9
    assert grid.min() > 1 and grid.max() < 100


# -- evaluation --------------------------------------------------------------


def linear_scan(curve, x):
    seg = 0
    for b in curve.breakpoints:
        if x > b:
            seg += 1
    return curve.slopes[seg] * x + curve.intercepts[seg]


def test_evaluate_matches_linear_scan(three_segment):
    rng = np.random.default_rng(3)
    xs = rng.uniform(*three_segment.fit_domain, 100)
    got = evaluate_curve(three_segment, xs, floor=-np.inf)
    assert list(got) == [linear_scan(three_segment, x) for x in xs]


def test_evaluate_at_breakpoints_and_beyond(three_segment):
    for i, b in enumerate(three_segment.breakpoints):
        left = three_segment.slopes[i] * b + three_segment.intercepts[i]
        assert evaluate_curve(three_segment, b) == pytest.approx(left, rel=1e-6)
    hi = three_segment.fit_domain[1]
    expected = three_segment.slopes[-1] * (hi + 0.1) + three_segment.intercepts[-1]
    assert evaluate_curve(three_segment, hi + 0.1) == pytest.approx(expected, rel=1e-12)
    assert evaluate_curve(three_segment, -5.0) == 0.0
    assert evaluate_curve(three_segment, -5.0, floor=-np.inf) < 0


def test_curve_json_round_trip_is_lossless():
    days, _ = generate(SynthConfig(num_days=1, price_noise_std=2, seed=1))
    curve = fit_supply_curve(pool_points(days))
    assert SupplyCurve.from_json(curve.to_json()) == curve
    assert set(json.loads(curve.to_json())) == {"n", "breakpoints", "slopes", "intercepts",
                                                "fit_domain", "sse"}


def test_curve_invariants_enforced():
    with pytest.raises(ValueError, match="discontinuous"):
        SupplyCurve(2, (0.5,), (1.0, 2.0), (0.0, 0.0), (0.0, 1.0))
    with pytest.raises(ValueError, match="increasing"):
        SupplyCurve.from_anchor((0.6, 0.5), (1, 2, 3), 0.0, (0.0, 1.0))
    with pytest.raises(ValueError, match="inside"):
        SupplyCurve.from_anchor((1.5,), (1, 2), 0.0, (0.0, 1.0))


# -- day selection -----------------------------------------------------------


def week(curves, k=96):
    lr = daily_load_rates(k)
    return [make_day(START + i, c, lr) for i, c in enumerate(curves)]


def test_identical_days_all_retained(three_segment):
    days = week([three_segment] * 7)
    assert select_recent_days(days) == days


def test_shape_change_truncates_history(three_segment):
    steep = SupplyCurve.from_anchor(three_segment.breakpoints, (300.0, 180.0, 600.0), 10.0,
                                    three_segment.fit_domain)
    curves = [three_segment] * 7
    curves[3] = steep
    days = week(curves)
    assert select_recent_days(days, FitConfig(shape_deviation_threshold=0.5)) == days[4:]


def test_single_day_retained(three_segment):
    days = week([three_segment])
    assert select_recent_days(days) == days


def test_lookback_window_applies(three_segment):
    days = week([three_segment] * 10)
    assert select_recent_days(days) == days[-7:]


def test_noiseless_days_pass_any_threshold(three_segment):
    days = week([three_segment] * 5)
    for tau in (1e-9, 1.0, None):
        assert filter_irregular_days(days, FitConfig(day_deviation_threshold=tau)) == days


@pytest.mark.parametrize("seed", range(10))
def test_random_price_day_dropped(seed, three_segment):
    rng = np.random.default_rng(seed)
    lr = daily_load_rates()
    days = week([three_segment] * 7)
    noisy = make_day(days[2].day_index, three_segment, lr)
    junk = rng.uniform(0, 300, 96) - noisy.prices
    days[2] = make_day(days[2].day_index, three_segment, lr, price_noise=junk)
    kept = filter_irregular_days(days, FitConfig(day_deviation_threshold=10))
    assert kept == days[:2] + days[3:]


def test_infinite_threshold_is_identity():
    days, _ = generate(SynthConfig(num_days=4, price_noise_std=30, seed=1))
    assert filter_irregular_days(days, FitConfig(day_deviation_threshold=math.inf)) == days


def test_all_dropped_keeps_best_day_with_warning():
    days, _ = generate(SynthConfig(num_days=3, price_noise_std=10, seed=1))
    with pytest.warns(IrregularDaysWarning):
        kept = filter_irregular_days(days, FitConfig(day_deviation_threshold=1e-6))
    assert len(kept) == 1


def test_parallel_selection_matches_serial():
    days, _ = generate(SynthConfig(num_days=9, price_noise_std=4, curve_drift_per_day=0.1, seed=6))
    config = FitConfig(day_deviation_threshold=None)
    assert select_recent_days(days, config, 4) == select_recent_days(days, config, None)
    assert filter_irregular_days(days, config, 4) == filter_irregular_days(days, config, None)
    assert fit_curve(days, config, 4) == fit_curve(days, config, None)


# -- weighting and repair ----------------------------------------------------


def test_weights(three_segment):
    pts = points_from([0.5, 0.6, 0.8], [1, 2, 3])
    assert [p.weight for p in assign_weights(pts, three_segment)] == [5.0, 1.0, 5.0]
    neutral = assign_weights(pts, three_segment, FitConfig(outer_segment_weight=1))
    assert [p.weight for p in neutral] == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        assign_weights(pts, SupplyCurve(1, (), (1.0,), (0.0,), (0.0, 1.0)))


def test_outer_weighting_helps_sparse_outer_segments():
    config = FitConfig()
    wins = 0
    for seed in range(10):
        days, truths = generate(SynthConfig(num_days=7, price_noise_std=2, seed=seed,
                                            demand_profile=DemandProfile(noise_std=300)))
        truth = truths[-1]
        b1, b2 = truth.breakpoints
        pts = pool_points(days)
        rng = np.random.default_rng(seed)
        lo = [p for p in pts if p.load_rate < b1]
        hi = [p for p in pts if p.load_rate > b2]
        inner = [p for p in pts if b1 <= p.load_rate <= b2]
        subset = ([lo[i] for i in rng.choice(len(lo), 3, replace=False)] + inner
                  + [hi[i] for i in rng.choice(len(hi), 3, replace=False)])
        plain = fit_supply_curve(subset, config)
        weighted = fit_supply_curve(assign_weights(subset, plain, config), config)

        def outer_error(c):
            return abs(c.slopes[0] / truth.slopes[0] - 1) + abs(c.slopes[2] / truth.slopes[2] - 1)

        wins += outer_error(weighted) < outer_error(plain)
    assert wins >= 7


def test_repair_examples():
    curve = SupplyCurve.from_anchor((0.5, 0.7), (-12.0, 30.0, 90.0), 40.0, (0.4, 0.9))
    fixed = repair_curve(curve)
    assert fixed.slopes == (30.0, 30.0, 90.0)
    assert evaluate_curve(fixed, 0.5) == pytest.approx(evaluate_curve(curve, 0.5), rel=1e-12)
    assert fixed.intercepts[1:] == curve.intercepts[1:]
    ok = SupplyCurve.from_anchor((0.5, 0.7), (1.0, 30.0, 90.0), 40.0, (0.4, 0.9))
    assert repair_curve(ok) is ok
    bad = SupplyCurve.from_anchor((0.5, 0.7), (50.0, -2.0, 10.0), 40.0, (0.4, 0.9))
    with pytest.raises(UnrepairableFitError, match="unrepairable fit"):
        repair_curve(bad)
    with pytest.raises(ValueError):
        repair_curve(SupplyCurve(1, (), (1.0,), (0.0,), (0.0, 1.0)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.floats(0.41, 0.6),
       st.floats(0.05, 0.25), st.floats(0, 20))
def test_repair_is_idempotent_and_continuous(slopes, b1, gap, min_slope):
    assume(slopes[1] >= min_slope)
    curve = SupplyCurve.from_anchor((b1, b1 + gap), slopes, 30.0, (0.4, 0.9))
    config = FitConfig(min_slope=min_slope)
    once = repair_curve(curve, config)
    assert repair_curve(once, config) == once
    assert min(once.slopes) >= min_slope
    SupplyCurve(once.n, once.breakpoints, once.slopes, once.intercepts, once.fit_domain)


def test_pipeline_falls_back_to_a_line():
    # a falling middle section cannot be repaired
    bad = SupplyCurve(3, (0.55, 0.75), (300.0, -150.0, 600.0), (0.0, 247.5, -315.0), (0.45, 0.85))
    days = week([bad] * 3)
    result = fit_curve(days)
    assert result.fell_back and result.curve.n == 1
    assert all(p.weight == 1.0 for p in result.points)


def test_pipeline_repairs_negative_outer_slope():
    dip = SupplyCurve.from_anchor((0.55, 0.75), (-80.0, 60.0, 600.0), 40.0, (0.45, 0.85))
    days = week([dip] * 3)
    result = fit_curve(days)
    assert result.repaired and not result.fell_back
    assert min(result.curve.slopes) >= 0
    assert result.curve.sse == pytest.approx(curve_sse(result.curve, result.points), rel=1e-12)


def test_segment_count_selection(three_segment):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.45, 0.85, 300)
    pts3 = points_from(x, evaluate_curve(three_segment, x) + rng.normal(0, 1, 300))
    pts1 = points_from(x, 50 + 100 * x + rng.normal(0, 1, 300))
    assert select_segment_count(pts3)[0] == 3
    assert select_segment_count(pts1)[0] == 1
    assert segment_count_score(10.0, 2, 100) > segment_count_score(10.0, 1, 100)
