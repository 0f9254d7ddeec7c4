"""End-to-end runs of the command-line driver"""

import json
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO))

import latebind  # noqa: E402
from reportlib import load_run, read_csv, read_json, stamp, validate_run, write_json  # noqa: E402

SHIPPED = REPO / "configs" / "experiment.json"


def _config(tmp_path, **sections) -> str:
    """Shipped config with some sections overridden, written next to a copy of the DAG"""
    data = json.loads(SHIPPED.read_text())
    for name, values in sections.items():
        if isinstance(values, dict):
            data[name].update(values)
        else:
            data[name] = values
    data['planner'].update({'dag': str(REPO / "configs" / "traffic_dag.json")})
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(data))
    return str(path)


FIXTURE_SECTIONS = {
    'composer': {'accuracy_threshold': 0.96, 'memory_budget_mb': 167.0},
    'workload': {'duration_min': 20.0, 'request_rate_per_s': 1.0, 'rotation_period_min': 5.0},
    'adaptation': {'retrain_interval_min': 5.0},
    'planner': {'queries': 300, 'slos': [60.0, 100.0], 'audit_queries': 4},
}


def test_init_writes_loadable_config(tmp_path):
    assert latebind.main(['init', '--out', str(tmp_path)]) == latebind.EXIT_OK
    assert (tmp_path / "traffic_dag.json").exists()
    assert json.loads((tmp_path / "experiment.json").read_text()) == json.loads(SHIPPED.read_text())


def test_fixture_pipeline(tmp_path, capsys):
    config = _config(tmp_path, **FIXTURE_SECTIONS)
    out = tmp_path / "run"
    common = ['--config', config, '--out', str(out)]

    assert latebind.main(['explore', '--fixture', 'tradeoff-example'] + common) == 0
    assert latebind.main(['compose'] + common) == 0

    plan = read_json(out / "plan.json", "latebind-plan")
    assert [(c['layer'], c['variant_id']) for c in plan['chosen']] == [(3, 3), (6, 1)]
    assert plan['expected_latency_ms'] == pytest.approx(24.17284, abs=1e-4)
    report = read_json(out / "compose_report.json")
    assert report['constraint_audit']['feasible']
    assert report['exact']['latency_gap_ms'] == pytest.approx(0.0, abs=1e-9)
    _, curve = read_csv(out / "alpha_curve.csv")
    assert len(curve) == 11

    assert latebind.main(['simulate'] + common) == 0
    assert "falling back to profile-driven" in capsys.readouterr().out
    summary = read_json(out / "summary.json")
    assert summary['mode'] == "profile"
    assert summary['static']['requests'] == 1200
    assert summary['static']['retrain_events'] == []
    assert 'adaptive' not in summary

    assert latebind.main(['plan'] + common) == 0
    _, rows = read_csv(out / "plan_summary.csv")
    assert [(r['slo_ms'], r['replan']) for r in rows] == [('60.0', '0'), ('60.0', '1'), ('100.0', '0'),
                                                          ('100.0', '1')]
    audit = read_json(out / "plan_audit.json")
    assert audit['replan'] is False
    assert all(q['replan'] is False for q in audit['queries'])

    errors, _ = validate_run(out)
    assert errors == []
    run = load_run(out)
    assert run['hit_timeline'] and run['latency_cdf']


def test_gpu_fixture_changes_lookup_costs(tmp_path):
    config = _config(tmp_path, **FIXTURE_SECTIONS)
    cpu, gpu = tmp_path / "cpu", tmp_path / "gpu"
    assert latebind.main(['explore', '--fixture', 'tradeoff', '--config', config, '--out', str(cpu)]) == 0
    assert latebind.main(['explore', '--fixture', 'tradeoff', '--hardware', 'gpu',
                          '--config', config, '--out', str(gpu)]) == 0
    cpu_rows = read_json(cpu / "metrics.json")['rows']
    gpu_rows = read_json(gpu / "metrics.json")['rows']
    assert len(cpu_rows) == len(gpu_rows)
    assert [r['lookup_ms'] for r in cpu_rows] != [r['lookup_ms'] for r in gpu_rows]


TRAINED_SECTIONS = {
    'dataset': {'num_classes': 3, 'input_dim': 8, 'samples_per_class': 200, 'separation': 6.0, 'noise_std': 0.8,
                'split': [0.6, 0.2, 0.2]},
    'base_training': {'num_blocks': 3, 'block_width': 16, 'block_widths': None, 'layer_latency_ms': 4.0,
                      'training': {'learning_rate': 0.05, 'momentum': 0.9, 'epochs': 30, 'batch_size': 16}},
    'cache_training': {'predictor': {'learning_rate': 0.05, 'momentum': 0.9, 'epochs': 20, 'batch_size': 16},
                       'selector': {'learning_rate': 0.05, 'momentum': 0.9, 'epochs': 20, 'batch_size': 16}},
    'variants': ["FC(8)", "Pool(4)"],
    'composer': {'accuracy_threshold': 0.95},
    'workload': {'duration_min': 10.0, 'request_rate_per_s': 0.5, 'rotation_period_min': 5.0},
    'adaptation': {'retrain_interval_min': 5.0, 'window_min': 10.0, 'retrain_epochs': 1},
    'planner': {'queries': 100, 'slos': [80.0], 'audit_queries': 2},
}
PIPELINE = (['prepare'], ['explore'], ['compose'], ['simulate', '--adapt'], ['plan', '--replan'])


def test_trained_pipeline(tmp_path):
    config = _config(tmp_path, **TRAINED_SECTIONS)
    out = tmp_path / "run"
    for command in PIPELINE:
        assert latebind.main(command + ['--config', config, '--out', str(out)]) == 0, command

    metrics = read_json(out / "metrics.json")['rows']
    assert {(r['layer'], r['arch']) for r in metrics} == {(l, a) for l in (1, 2, 3) for a in ("FC(8)", "Pool(4)")}
    assert read_json(out / "plan.json", "latebind-plan")['chosen']
    summary = read_json(out / "summary.json")
    assert summary['mode'] == "model"
    assert summary['static']['requests'] == summary['adaptive']['requests'] == 300
    assert summary['static']['agreement_with_base'] >= 0.95
    assert summary['static']['avg_latency_ms'] < summary['total_latency_ms'] == 12.0
    assert read_json(out / "plan_audit.json")['replan'] is True
    assert read_json(out / "base_model.json.gz", "latebind-network")['config_hash'] == \
        read_json(out / "manifest.json")['config_hash']
    assert validate_run(out)[0] == []


def test_trained_pipeline_is_reproducible(tmp_path):
    config = _config(tmp_path, **TRAINED_SECTIONS)
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        for command in PIPELINE:
            assert latebind.main(command + ['--config', config, '--out', str(out)]) == 0, command
    assert (first / "traces_static.csv").read_bytes() == (second / "traces_static.csv").read_bytes()
    assert (first / "traces_adaptive.csv").read_bytes() == (second / "traces_adaptive.csv").read_bytes()
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()


def test_missing_artifacts_exit_code(tmp_path, capsys):
    config = _config(tmp_path)
    assert latebind.main(['compose', '--config', config, '--out', str(tmp_path / "empty")]) == latebind.EXIT_MISSING
    assert "✗ Missing artifact" in capsys.readouterr().err


def test_wrong_format_artifact_exit_code(tmp_path, capsys):
    config = _config(tmp_path, **FIXTURE_SECTIONS)
    out = tmp_path / "run"
    common = ['--config', config, '--out', str(out)]
    assert latebind.main(['explore', '--fixture', 'tradeoff-example'] + common) == 0
    write_json(out / "plan.json", stamp({'chosen': []}, "latebind-summary", "h"))
    assert latebind.main(['simulate'] + common) == latebind.EXIT_MISSING
    assert "✗ Unreadable artifact" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    config = _config(tmp_path, workload={'zipf_skew': "steep"})
    assert latebind.main(['plan', '--config', config, '--out', str(tmp_path)]) == latebind.EXIT_CONFIG
    assert "workload.zipf_skew" in capsys.readouterr().err
    assert latebind.main(['plan', '--config', str(tmp_path / "nope.json")]) == latebind.EXIT_CONFIG


def test_negative_memory_budget_is_infeasible(tmp_path):
    config = _config(tmp_path, composer={'memory_budget_mb': -1.0})
    out = str(tmp_path / "run")
    assert latebind.main(['explore', '--fixture', 'tradeoff', '--config', config, '--out', out]) == 0
    assert latebind.main(['compose', '--config', config, '--out', out]) == latebind.EXIT_INFEASIBLE


def test_seed_override_changes_config_hash(tmp_path):
    config = _config(tmp_path, **FIXTURE_SECTIONS)
    first, second = tmp_path / "a", tmp_path / "b"
    latebind.main(['explore', '--fixture', 'tradeoff', '--config', config, '--out', str(first)])
    latebind.main(['explore', '--fixture', 'tradeoff', '--config', config, '--out', str(second), '--seed', '9'])
    assert (read_json(first / "manifest.json")['config_hash']
            != read_json(second / "manifest.json")['config_hash'])
