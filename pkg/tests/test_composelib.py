"""Composition: scores, effective hit rates, constraints, relaxed and exact planning"""

import itertools

import numpy as np
import pytest

from baselib import LayerProfile
from cachelib import VariantMetrics
from composelib import (ComposerConfig, InfeasiblePlanError, InstanceTooLargeError, MissingMetricsError,
                        SelectionPlan, check_constraints, compose_exact, compose_relaxed, effective_hit_rates,
                        enumeration_size, expected_latency, latency_gain, plan_accuracy, read_plan,
                        relaxed_objective, score, sweep_accuracy_targets, sweep_alpha, write_plan)

WORKED = ComposerConfig(accuracy_threshold=0.96, memory_budget_mb=167.0, alpha=0.2)


def _row(layer, vid, hit, acc=0.99, t=0.1, mem=1.0):
    return VariantMetrics(layer, vid, f"FC({vid})", hit, acc, t, mem)


def test_latency_gain_and_score(uniform_profile):
    assert latency_gain(uniform_profile, 3, 1.32) == pytest.approx(32 / 13.32)
    assert score(0.5, 2.0, 0.2) == pytest.approx(0.1 + 1.6)
    with pytest.raises(ValueError):
        latency_gain(uniform_profile, 9, 0.1)
    with pytest.raises(ValueError):
        latency_gain(uniform_profile, 1, -1.0)


def test_effective_hit_rates_subtract_shallower_hits(tradeoff_metrics):
    plan = SelectionPlan(((6, 3), (3, 3)))
    assert plan.chosen == ((3, 3), (6, 3))
    eh = effective_hit_rates(plan, tradeoff_metrics)
    assert eh == [pytest.approx(0.341), pytest.approx(0.203)]


def test_effective_hit_rate_clamps_with_warning(caplog):
    rows = [_row(2, 1, 0.6), _row(5, 1, 0.4)]
    with caplog.at_level("WARNING"):
        eh = effective_hit_rates(SelectionPlan(((2, 1), (5, 1))), rows)
    assert eh == [pytest.approx(0.6), 0.0]
    assert "clamped" in caplog.text


def test_expected_latency_single_variant(tradeoff_metrics, uniform_profile):
    plan = SelectionPlan(((3, 1),))
    assert expected_latency(plan, tradeoff_metrics, uniform_profile) == pytest.approx(0.388 * 18.08 + 0.612 * 32)
    precise = [VariantMetrics(3, 1, "FC(1024)", 0.3875, 0.973, 6.08, 268.0)]
    assert expected_latency(plan, precise, uniform_profile) == pytest.approx(26.606)


def test_empty_plan_is_the_base_model(tradeoff_metrics, uniform_profile):
    plan = SelectionPlan()
    assert expected_latency(plan, tradeoff_metrics, uniform_profile) == 32.0
    assert plan_accuracy(plan, tradeoff_metrics) == 1.0
    assert check_constraints(plan, tradeoff_metrics, uniform_profile, WORKED).feasible


def test_plan_accuracy_counts_misses_as_correct(tradeoff_metrics):
    plan = SelectionPlan(((3, 3), (6, 3)))
    expected = 0.341 * 0.967 + 0.203 * 0.962 + 0.456
    assert plan_accuracy(plan, tradeoff_metrics) == pytest.approx(expected)


def test_missing_metrics(tradeoff_metrics, uniform_profile):
    with pytest.raises(MissingMetricsError):
        expected_latency(SelectionPlan(((4, 1),)), tradeoff_metrics, uniform_profile)


def test_constraint_violations(uniform_profile):
    rows = [_row(2, 1, 0.3, t=9.0), _row(2, 2, 0.2), _row(4, 1, 0.5, acc=0.5, mem=3.0)]
    verdict = check_constraints(SelectionPlan(((2, 1), (4, 1))), rows, uniform_profile,
                                ComposerConfig(accuracy_threshold=0.97, memory_budget_mb=2.0))
    assert not verdict.feasible
    text = ' '.join(verdict.violations)
    assert "exceeds 8.0000 ms" in text
    assert "memory" in text
    assert "plan accuracy" in text

    twice = check_constraints(SelectionPlan(((2, 1), (2, 2))), rows, uniform_profile)
    assert any("at most one per layer" in v for v in twice.violations)


def test_lookup_may_fill_the_window_exactly(uniform_profile):
    rows = [_row(2, 1, 0.3, t=8.0), _row(4, 1, 0.3, t=16.0)]
    assert check_constraints(SelectionPlan(((2, 1), (4, 1))), rows, uniform_profile).feasible


def test_last_layer_variant_never_fits(uniform_profile):
    rows = [_row(8, 1, 0.9, t=0.01)]
    assert not check_constraints(SelectionPlan(((8, 1),)), rows, uniform_profile).feasible
    plan = compose_relaxed(rows, uniform_profile, ComposerConfig(accuracy_threshold=0.5))
    assert plan.chosen == ()


def test_relaxed_worked_example(tradeoff_example_metrics, uniform_profile):
    plan = compose_relaxed(tradeoff_example_metrics, uniform_profile, WORKED)
    assert plan.chosen == ((3, 3), (6, 1))
    assert plan.method == "relaxed" and plan.alpha == 0.2
    assert expected_latency(plan, tradeoff_example_metrics, uniform_profile) == pytest.approx(24.17284)


def test_exact_worked_example(tradeoff_example_metrics, uniform_profile):
    plan = compose_exact(tradeoff_example_metrics, uniform_profile, WORKED)
    assert plan.chosen == ((3, 3), (6, 1))
    assert plan.method == "exact"


def test_exact_full_table(tradeoff_metrics, uniform_profile):
    plan = compose_exact(tradeoff_metrics, uniform_profile, WORKED)
    assert plan.chosen == ((3, 3), (6, 3))
    assert expected_latency(plan, tradeoff_metrics, uniform_profile) == pytest.approx(24.13604)
    assert check_constraints(plan, tradeoff_metrics, uniform_profile, WORKED).feasible


def test_relaxed_respects_every_constraint(tradeoff_metrics, uniform_profile):
    for budget in (0.0, 1.0, 34.0, 167.0, 500.0):
        cfg = ComposerConfig(accuracy_threshold=0.96, memory_budget_mb=budget)
        plan = compose_relaxed(tradeoff_metrics, uniform_profile, cfg)
        assert check_constraints(plan, tradeoff_metrics, uniform_profile).feasible
        assert sum(m.memory_mb for m in tradeoff_metrics if m.key in plan.chosen) <= budget


def test_zero_memory_budget_gives_empty_plan(tradeoff_metrics, uniform_profile):
    cfg = ComposerConfig(accuracy_threshold=0.96, memory_budget_mb=0.0)
    assert compose_relaxed(tradeoff_metrics, uniform_profile, cfg).chosen == ()
    assert compose_exact(tradeoff_metrics, uniform_profile, cfg).chosen == ()


def test_negative_budget_is_infeasible(tradeoff_metrics, uniform_profile):
    cfg = ComposerConfig(memory_budget_mb=-1.0)
    with pytest.raises(InfeasiblePlanError):
        compose_relaxed(tradeoff_metrics, uniform_profile, cfg)
    with pytest.raises(InfeasiblePlanError):
        compose_exact(tradeoff_metrics, uniform_profile, cfg)


def test_accuracy_threshold_filters_variants(tradeoff_metrics, uniform_profile):
    cfg = ComposerConfig(accuracy_threshold=0.99, memory_budget_mb=500.0)
    plan = compose_relaxed(tradeoff_metrics, uniform_profile, cfg)
    assert set(plan.chosen) <= {(6, 1), (6, 5)}


def test_relaxed_is_never_better_than_exact(tradeoff_metrics, uniform_profile):
    for alpha in (0.0, 0.5, 1.0):
        cfg = ComposerConfig(accuracy_threshold=0.96, memory_budget_mb=167.0, alpha=alpha)
        relaxed = compose_relaxed(tradeoff_metrics, uniform_profile, cfg)
        exact = compose_exact(tradeoff_metrics, uniform_profile, cfg)
        assert (expected_latency(exact, tradeoff_metrics, uniform_profile)
                <= expected_latency(relaxed, tradeoff_metrics, uniform_profile) + 1e-9)


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    profile = LayerProfile(tuple(rng.uniform(0.5, 4.0, size=n)))
    rows = []
    for layer in range(1, n + 1):
        for vid in range(1, int(rng.integers(1, 4)) + 1):
            rows.append(VariantMetrics(layer, vid, f"FC({vid})", float(rng.uniform(0.0, 0.8)),
                                       float(rng.uniform(0.85, 1.0)), float(rng.uniform(0.0, 6.0)),
                                       float(rng.uniform(0.0, 10.0))))
    cfg = ComposerConfig(accuracy_threshold=float(rng.uniform(0.85, 0.99)),
                         memory_budget_mb=float(rng.uniform(0.0, 20.0)), alpha=float(rng.uniform(0.0, 1.0)))
    return rows, profile, cfg


def _best_objective_by_enumeration(rows, profile, cfg):
    options = {}
    for row in rows:
        options.setdefault(row.layer, [None]).append(row.key)
    best = 0.0
    for selection in itertools.product(*options.values()):
        plan = SelectionPlan(tuple(key for key in selection if key is not None))
        if not all(row.accuracy >= cfg.accuracy_threshold for row in rows if row.key in plan.chosen):
            continue
        if check_constraints(plan, rows, profile, cfg).feasible:
            best = max(best, relaxed_objective(plan, rows, profile, cfg.alpha))
    return best


@pytest.mark.parametrize("seed", range(200))
def test_relaxed_matches_exhaustive_score_maximization(seed):
    rows, profile, cfg = _random_instance(seed)
    plan = compose_relaxed(rows, profile, cfg)
    assert check_constraints(plan, rows, profile, cfg).feasible
    assert relaxed_objective(plan, rows, profile, cfg.alpha) == pytest.approx(
        _best_objective_by_enumeration(rows, profile, cfg), abs=1e-9)


def test_ties_prefer_fewer_variants(uniform_profile):
    # a second variant that adds nothing: equal latency, so the smaller plan wins
    rows = [_row(2, 1, 0.5, t=0.5), _row(4, 1, 0.5, t=0.5)]
    cfg = ComposerConfig(accuracy_threshold=0.9, memory_budget_mb=10.0)
    assert compose_exact(rows, uniform_profile, cfg).chosen == ((2, 1),)


def test_relaxed_objective(tradeoff_example_metrics, uniform_profile):
    plan = SelectionPlan(((3, 3), (6, 1)))
    expected = score(0.341, 32 / 13.32, 0.2) + score(0.629, 32 / 26.94, 0.2)
    assert relaxed_objective(plan, tradeoff_example_metrics, uniform_profile, 0.2) == pytest.approx(expected)


def test_enumeration_limit(uniform_profile):
    assert enumeration_size([]) == 1
    rows = [_row(layer, vid, 0.01) for layer in range(1, 9) for vid in range(1, 9)]
    assert enumeration_size(rows) == 9 ** 8
    with pytest.raises(InstanceTooLargeError):
        compose_exact(rows, uniform_profile, ComposerConfig())


def test_alpha_sweep_picks_lowest_latency(tradeoff_metrics, uniform_profile):
    sweep = sweep_alpha(tradeoff_metrics, uniform_profile, WORKED)
    assert len(sweep.curve) == 11
    best = min(p.expected_latency for p in sweep.curve if p.plan_accuracy >= 0.96)
    assert expected_latency(sweep.plan, tradeoff_metrics, uniform_profile) == pytest.approx(best)
    swept = compose_relaxed(tradeoff_metrics, uniform_profile, ComposerConfig(0.96, 167.0, "sweep"))
    assert swept.chosen == sweep.plan.chosen


def test_alpha_must_be_in_range():
    with pytest.raises(ValueError):
        ComposerConfig(alpha=1.5)
    with pytest.raises(ValueError):
        ComposerConfig(alpha="auto")
    with pytest.raises(ValueError):
        ComposerConfig(max_concurrent_lookups=2)


def test_accuracy_target_sweep(tradeoff_metrics, uniform_profile):
    rows = sweep_accuracy_targets(tradeoff_metrics, uniform_profile, WORKED, [0.96, 0.99])
    assert [r['target'] for r in rows] == [0.96, 0.99]
    assert rows[0]['exact_plan'] == ["L3_V3", "L6_V3"]
    assert rows[1]['exact_latency_ms'] >= rows[0]['exact_latency_ms']


def test_plan_file_round_trip(tmp_path, tradeoff_metrics, uniform_profile):
    plan = SelectionPlan(((3, 3), (6, 3)), 0.2, "relaxed")
    path = tmp_path / "plan.json"
    write_plan(path, plan, tradeoff_metrics, uniform_profile, "abc")
    assert read_plan(path) == plan


def test_next_links():
    plan = SelectionPlan(((3, 1), (6, 2)))
    assert plan.next_links(8) == {(3, 1): 6, (6, 2): 9}
    assert plan.layers == [3, 6]
    assert len(plan) == 2
