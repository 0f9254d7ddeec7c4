"""Query DAGs, latency budgets, model picks, replanning and the SLO sweep"""

import json

import numpy as np
import pytest

from planlib import (EQUAL, PROPORTIONAL, DagError, ModelOption, UnknownNodeError, build_dag,
                     cache_hit_oracle, compute_budgets, dag_from_dict, dag_to_dict, dump_dag,
                     fixed_latency_oracle, load_dag, on_execution_complete, pick_best_model, run_query,
                     slo_sweep)
from reportlib import MissingArtifactError


def _diamond():
    nodes = {
        'a': [ModelOption('a1', 10.0, 0.9)],
        'b': [ModelOption('b1', 10.0, 0.9)],
        'c': [ModelOption('c1', 20.0, 0.8), ModelOption('c2', 40.0, 0.95)],
        'd': [ModelOption('d1', 15.0, 0.85), ModelOption('d2', 40.0, 0.97)],
    }
    return build_dag(nodes, [('a', 'b'), ('a', 'c'), ('b', 'd'), ('c', 'd')], name='diamond')


def test_traffic_dag_structure(dag):
    assert dag.root == 'objdet' and dag.sink == 'output'
    assert dag.model_nodes[0] == 'objdet'
    assert sorted(dag.paths()) == [['objdet', 'face'], ['objdet', 'vehicle']]
    assert dag.options('output') == ()
    assert dag.max_latency('face') == 110.32
    assert sorted(label for _, label, _ in dag.children('objdet')) == ['face', 'vehicle']


@pytest.mark.parametrize("edges", [
    [('a', 'b'), ('b', 'a')],
    [('a', 'c'), ('b', 'c')],
    [('a', 'b'), ('a', 'c')],
])
def test_malformed_graphs(edges):
    nodes = {n: [ModelOption(n, 1.0, 0.5)] for n in 'abc'}
    with pytest.raises(DagError):
        build_dag(nodes, edges)


def test_dag_validation_messages():
    with pytest.raises(DagError):
        build_dag({'a': [], 'b': []}, [('a', 'b')])
    with pytest.raises(DagError):
        build_dag({'a': [ModelOption('x', 1.0, 0.5)]}, [('a', 'z')])
    with pytest.raises(DagError):
        build_dag({'a': [ModelOption('x', 1.0, 0.5)], 'b': []}, [('a', 'b', 'next', 0.0)])
    with pytest.raises(DagError):
        ModelOption('x', 0.0, 0.5)
    with pytest.raises(DagError):
        dag_from_dict({'nodes': [{'name': 'a'}]})


def test_dag_file_round_trip(tmp_path, dag):
    path = tmp_path / "dag.json"
    dump_dag(dag, path)
    loaded = load_dag(path)
    assert dag_to_dict(loaded) == dag_to_dict(dag)
    assert loaded.slo_ms == 80.0


def test_load_dag_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_dag(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(DagError):
        load_dag(bad)
    cyclic = tmp_path / "cyclic.json"
    cyclic.write_text(json.dumps({'nodes': [{'name': 'a', 'options': [{'name': 'x', 'latency_ms': 1,
                                                                        'accuracy': 0.5}]},
                                            {'name': 'b', 'options': []}],
                                  'edges': [{'src': 'a', 'dst': 'b'}, {'src': 'b', 'dst': 'a'}]}))
    with pytest.raises(DagError):
        load_dag(cyclic)


def test_equal_budgets(dag):
    budgets = compute_budgets(dag, 80.0, EQUAL)
    assert budgets == {'objdet': 40.0, 'face': 40.0, 'vehicle': 40.0}
    assert 'output' not in budgets


def test_proportional_budgets_take_the_smallest_share(dag):
    budgets = compute_budgets(dag, 80.0, PROPORTIONAL)
    via_face = 80.0 * 54.5 / (54.5 + 110.32)
    via_vehicle = 80.0 * 54.5 / (54.5 + 111.42)
    assert budgets['objdet'] == pytest.approx(min(via_face, via_vehicle))
    assert budgets['face'] == pytest.approx(80.0 * 110.32 / 164.82)


def test_shared_downstream_node_gets_the_minimum():
    budgets = compute_budgets(_diamond(), 90.0, PROPORTIONAL)
    assert budgets['a'] == pytest.approx(min(90 * 10 / 60, 90 * 10 / 90))
    assert budgets['d'] == pytest.approx(min(90 * 40 / 60, 90 * 40 / 90))


def test_budget_arguments():
    with pytest.raises(ValueError):
        compute_budgets(_diamond(), 0.0)
    with pytest.raises(ValueError):
        compute_budgets(_diamond(), 50.0, "greedy")


def test_pick_best_model(dag):
    assert pick_best_model(dag.options('face'), 40.0).option.name == 'SE-LResNet18E-IR'
    assert pick_best_model(dag.options('face'), 36.75).option.name == 'SE-LResNet18E-IR'
    tight = pick_best_model(dag.options('objdet'), 10.0)
    assert tight.option.name == 'ResNet-18' and tight.slo_risk
    assert not pick_best_model(dag.options('objdet'), 100.0).slo_risk
    with pytest.raises(DagError):
        pick_best_model([], 10.0)


def test_pick_ties_go_to_the_faster_option():
    options = [ModelOption('slow', 30.0, 0.9), ModelOption('fast', 20.0, 0.9)]
    assert pick_best_model(options, 50.0).option.name == 'fast'


def test_saved_latency_flows_downstream(dag):
    budgets = compute_budgets(dag, 80.0)
    updated = on_execution_complete(budgets, dag, 'objdet', 20.0)
    assert updated['face'] == pytest.approx(60.0)
    assert updated['vehicle'] == pytest.approx(60.0)
    assert budgets['face'] == 40.0
    assert on_execution_complete(budgets, dag, 'objdet', 55.0) == budgets
    with pytest.raises(UnknownNodeError):
        on_execution_complete(budgets, dag, 'output', 1.0)


def test_saving_split_over_a_fork():
    diamond = _diamond()
    budgets = compute_budgets(diamond, 90.0, EQUAL)
    updated = on_execution_complete(budgets, diamond, 'a', 10.0)
    assert updated['b'] == pytest.approx(40.0)
    assert updated['c'] == pytest.approx(40.0)
    assert updated['d'] == pytest.approx(40.0)


def test_run_query_with_replanning_upgrades_downstream(dag):
    oracle = cache_hit_oracle('objdet', 1.0, 20.0)
    static = run_query(dag, 80.0, EQUAL, oracle, False, np.random.default_rng(0))
    replan = run_query(dag, 80.0, EQUAL, oracle, True, np.random.default_rng(0))
    assert static.path == replan.path
    second = static.path[1]
    assert static.choices[second] in ('SE-LResNet18E-IR', 'ResNet-18')
    assert replan.choices[second] in ('SE-LResNet50E-IR', 'ResNet-50')
    assert replan.expected_accuracy > static.expected_accuracy
    assert replan.audit[0]['saved_ms'] == pytest.approx(20.0)
    assert replan.audit[0]['budgets_after'][second] == pytest.approx(60.0)
    assert static.path[-1] == 'output'


def test_fixed_latency_replanning_never_hurts(dag):
    for q in range(200):
        static = run_query(dag, 100.0, EQUAL, fixed_latency_oracle(), False, np.random.default_rng([1, q]))
        replan = run_query(dag, 100.0, EQUAL, fixed_latency_oracle(), True, np.random.default_rng([1, q]))
        assert replan.expected_accuracy >= static.expected_accuracy


def test_cache_hits_make_replanning_pay_off(dag):
    oracle = cache_hit_oracle('objdet', 0.3, 20.0)
    for q in range(200):
        static = run_query(dag, 80.0, EQUAL, oracle, False, np.random.default_rng([2, q]))
        replan = run_query(dag, 80.0, EQUAL, oracle, True, np.random.default_rng([2, q]))
        assert replan.expected_accuracy >= static.expected_accuracy
        assert static.path == replan.path


def test_slo_violation_flag(dag):
    result = run_query(dag, 30.0, EQUAL, fixed_latency_oracle(), False, np.random.default_rng(0))
    assert result.slo_risk
    assert result.slo_violated == (result.total_latency_ms > 30.0)


def test_slo_sweep(dag):
    oracle = cache_hit_oracle('objdet', 0.3, 20.0)
    rows, audits = slo_sweep(dag, [60.0, 120.0], EQUAL, oracle, queries=300, seed=4, audit_queries=2)
    assert [(r['slo_ms'], r['replan']) for r in rows] == [(60.0, False), (60.0, True), (120.0, False),
                                                         (120.0, True)]
    for static, replan in zip(rows[::2], rows[1::2]):
        assert replan['mean_expected_accuracy'] >= static['mean_expected_accuracy']
        assert 0.0 <= static['mean_accuracy'] <= 1.0
    assert rows[2]['mean_expected_accuracy'] >= rows[0]['mean_expected_accuracy']
    assert len(audits) == 8
    assert audits[0]['steps'][0]['node'] == 'objdet'


def test_cache_hit_oracle():
    option = ModelOption('m', 50.0, 0.9)
    oracle = cache_hit_oracle('n', 0.3, 20.0)
    assert oracle('n', option, 0.1) == 20.0
    assert oracle('n', option, 0.5) == 50.0
    assert oracle('other', option, 0.1) == 50.0
    assert oracle('n', ModelOption('tiny', 5.0, 0.5), 0.1) == 5.0
    with pytest.raises(ValueError):
        cache_hit_oracle('n', 1.5)
