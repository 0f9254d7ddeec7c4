"""
LATEBIND - Learned caches for late-binding DNN inference
Command-line driver: prepare, explore, compose, simulate, plan
"""

import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent / 'src'))

import numpy as np

from baselib import (LayerProfile, base_model_from_network, cache_split, gen_dataset, load_dataset,
                     save_dataset, train_base)
from cachelib import (explore, load_variant, read_metrics, save_variant, tradeoff_fixture, variant_paths,
                      write_metrics)
from composelib import (MAX_ENUMERATION, InfeasiblePlanError, check_constraints, compose_exact, compose_relaxed,
                        enumeration_size, expected_latency, plan_accuracy, plan_to_dict, read_plan,
                        relaxed_objective, sweep_accuracy_targets, sweep_alpha, write_plan)
from configlib import (ConfigError, ExperimentConfig, adaptation_config, base_train_config, base_widths,
                       cache_training_config, composer_config, config_hash, cost_model, dag_path, dataset_spec,
                       default_paths, layer_profile, load_config, variant_menu, with_seed, workload_spec,
                       write_config)
from nnlib import load_network, save_network
from planlib import DagError, cache_hit_oracle, dump_dag, load_dag, slo_sweep, traffic_dag
from reportlib import (ALPHA_CURVE_FILE, BASE_MODEL_FILE, COMPOSE_REPORT_FILE, DATASET_FILE, HIT_TIMELINE_FILE,
                       LATENCY_CDF_FILE, METRICS_FILE, PLAN_AUDIT_FILE, PLAN_FILE, PLAN_SUMMARY_FILE,
                       PROFILE_FILE, SUMMARY_FILE, TRACES_ADAPTIVE_FILE, TRACES_STATIC_FILE, VARIANTS_DIR,
                       ArtifactFormatError, MissingArtifactError, print_section, progress_bar, read_json, require,
                       stamp, write_csv, write_json, write_manifest)
from simlib import (MODEL_DRIVEN, PROFILE_DRIVEN, gen_workload, hit_timeline, latency_cdf, run_adaptation,
                    simulate, summarize, write_timeline, write_traces)

logger = logging.getLogger("latebind")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_MISSING = 4

PROFILE_FORMAT = "latebind-profile"


def cmd_init(out_dir: Path):
    """Write the default experiment config and traffic DAG"""
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(ExperimentConfig(), out_dir / "experiment.json")
    dump_dag(traffic_dag(), out_dir / "traffic_dag.json")
    print(f"✓ Wrote {out_dir / 'experiment.json'}")
    print(f"✓ Wrote {out_dir / 'traffic_dag.json'}")


def _write_profile(cfg: ExperimentConfig, out: Path, chash: str, model=None):
    payload = layer_profile(cfg).to_dict()
    if model is not None:
        payload.update({'num_blocks': model.num_blocks, 'tap_dims': model.tap_dims,
                        'test_accuracy': model.test_accuracy, 'loss_history': model.loss_history})
    write_json(out / PROFILE_FILE, stamp(payload, PROFILE_FORMAT, chash))


def _read_profile(out: Path):
    payload = read_json(out / PROFILE_FILE, PROFILE_FORMAT)
    return LayerProfile.from_dict(payload), payload


def _load_base(out: Path):
    _, payload = _read_profile(out)
    net = load_network(require(out / BASE_MODEL_FILE))
    return base_model_from_network(net, payload.get('test_accuracy'))


def cmd_prepare(cfg: ExperimentConfig, out: Path, chash: str):
    """Dataset + trained base model + layer profile"""
    out.mkdir(parents=True, exist_ok=True)
    dataset = gen_dataset(dataset_spec(cfg))
    print(f"✓ Dataset: {len(dataset.train)} train / {len(dataset.validation)} validation / "
          f"{len(dataset.test)} test samples, {dataset.num_classes} classes")

    model = train_base(dataset, base_train_config(cfg), base_widths(cfg))
    print(f"✓ Base model: {model.num_blocks} blocks {model.tap_dims}, test accuracy {model.test_accuracy:.4f}")

    save_dataset(dataset, out / DATASET_FILE, chash)
    save_network(model.network, out / BASE_MODEL_FILE, chash)
    _write_profile(cfg, out, chash, model)
    print(f"✓ Profile: {layer_profile(cfg).num_layers} blocks, {layer_profile(cfg).total:.2f} ms total")


def cmd_explore(cfg: ExperimentConfig, out: Path, chash: str, fixture=None, hardware: str = "cpu"):
    """Train and measure every (layer, variant) pair, or load fixture metrics"""
    out.mkdir(parents=True, exist_ok=True)
    if fixture:
        rows = tradeoff_fixture(hardware, "example" if fixture == "tradeoff-example" else "full")
        write_metrics(out / METRICS_FILE, rows, chash, source=f"{fixture}:{hardware}")
        if not (out / PROFILE_FILE).exists():
            _write_profile(cfg, out, chash)
        print(f"✓ Loaded {len(rows)} fixture metric rows ({fixture}, {hardware})")
        return

    dataset = load_dataset(out / DATASET_FILE)
    base = _load_base(out)
    train, measure = cache_split(dataset.validation, cfg.cache_training.train_fraction, cfg.seed + 3)
    menu = variant_menu(cfg)

    def on_done(done, total):
        print(f"\r{progress_bar(done, total)}", end='', flush=True)

    results = explore(base, train, measure, menu, cost_model(cfg), cache_training_config(cfg), cfg.seed,
                      cfg.cache_training.layers, cfg.workers, on_done)
    print()
    for variant, _ in results:
        save_variant(variant, out / VARIANTS_DIR, chash)
    rows = [metrics for _, metrics in results]
    write_metrics(out / METRICS_FILE, rows, chash)

    print_section("VARIANT METRICS")
    print(f"{'variant':<10} {'arch':<11} {'H':>6} {'A':>6} {'T ms':>8} {'M MB':>8} {'delta':>6}")
    for row in rows:
        print(f"L{row.layer}_V{row.variant_id:<6} {row.arch:<11} {row.hit_rate:6.3f} {row.accuracy:6.3f} "
              f"{row.lookup_ms:8.4f} {row.memory_mb:8.4f} {row.threshold:6.2f}")
    print(f"\n✓ {len(rows)} metric rows written")


def cmd_compose(cfg: ExperimentConfig, out: Path, chash: str):
    """Plan + alpha curve + exact comparison + constraint audit"""
    metrics = read_metrics(out / METRICS_FILE)
    profile, _ = _read_profile(out)
    composer = composer_config(cfg)

    plan = compose_relaxed(metrics, profile, composer)
    sweep = sweep_alpha(metrics, profile, composer)
    verdict = check_constraints(plan, metrics, profile, composer)

    report = {
        'plan': plan_to_dict(plan, metrics, profile),
        'constraint_audit': {'feasible': verdict.feasible, 'violations': verdict.violations},
        'best_alpha': sweep.best_alpha,
        'exact': None,
        'accuracy_targets': sweep_accuracy_targets(metrics, profile, composer, cfg.composer.accuracy_targets),
    }
    size = enumeration_size(metrics)
    if size <= MAX_ENUMERATION:
        exact = compose_exact(metrics, profile, composer)
        alpha = plan.alpha if plan.alpha is not None else sweep.best_alpha
        report['exact'] = {
            'plan': plan_to_dict(exact, metrics, profile),
            'latency_gap_ms': expected_latency(plan, metrics, profile) - expected_latency(exact, metrics, profile),
            'relaxed_objective': relaxed_objective(plan, metrics, profile, alpha),
        }
    else:
        logger.info("skipping exact composition: %d selections", size)

    write_plan(out / PLAN_FILE, plan, metrics, profile, chash)
    write_json(out / COMPOSE_REPORT_FILE, stamp(report, "latebind-compose-report", chash))
    write_csv(out / ALPHA_CURVE_FILE, ('alpha', 'plan', 'expected_latency_ms', 'plan_accuracy', 'memory_mb'),
              ((p.alpha, ' '.join(f"L{i}_V{j}" for i, j in p.plan.chosen), p.expected_latency,
                p.plan_accuracy, p.memory_mb) for p in sweep.curve), chash)

    print_section("COMPOSITION")
    chosen = ', '.join(f"L{c['layer']}_V{c['variant_id']} {c['arch']} (EH {c['effective_hit_rate']:.3f})"
                       for c in report['plan']['chosen']) or '(empty plan)'
    print(f"Plan:             {chosen}")
    print(f"Expected latency: {report['plan']['expected_latency_ms']:.4f} ms "
          f"(base {profile.total:.2f} ms)")
    print(f"Plan accuracy:    {plan_accuracy(plan, metrics):.4f}")
    print(f"Memory:           {report['plan']['memory_mb']:.4f} MB of {composer.memory_budget_mb} MB")
    if report['exact']:
        print(f"Exact optimum:    {report['exact']['plan']['expected_latency_ms']:.4f} ms "
              f"(gap {report['exact']['latency_gap_ms']:.4f} ms)")
    print(f"Best alpha:       {sweep.best_alpha}")
    print(f"\n✓ {'Feasible' if verdict.feasible else 'Infeasible: ' + '; '.join(verdict.violations)}")


def _load_variants(out: Path, plan, metrics, num_classes: int, seed: int):
    index = {row.key: row for row in metrics}
    variants = {}
    for key in plan.chosen:
        if not all(p.exists() for p in variant_paths(out / VARIANTS_DIR, *key)):
            return None
        variants[key] = load_variant(out / VARIANTS_DIR, index[key], num_classes, seed)
    return variants


def cmd_simulate(cfg: ExperimentConfig, out: Path, chash: str, adapt: bool = False):
    """Static run always; adaptive run with --adapt; traces, summary, CDF and timeline"""
    plan = read_plan(out / PLAN_FILE)
    metrics = read_metrics(out / METRICS_FILE)
    profile, _ = _read_profile(out)
    adaptation = adaptation_config(cfg)
    mode = cfg.workload.mode

    dataset = load_dataset(out / DATASET_FILE) if (out / DATASET_FILE).exists() else None
    base = _load_base(out) if (out / BASE_MODEL_FILE).exists() else None
    variants = None
    if mode == MODEL_DRIVEN and base is not None and dataset is not None:
        variants = _load_variants(out, plan, metrics, base.num_classes, cfg.seed)
    if mode == MODEL_DRIVEN and variants is None:
        print("⚠️  No trained variants for this plan; falling back to profile-driven simulation")
        mode = PROFILE_DRIVEN

    stream = gen_workload(workload_spec(cfg), dataset.test if dataset is not None else None)
    runs = {}
    if mode == MODEL_DRIVEN:
        result = run_adaptation(base, plan, variants, metrics, stream, profile, adaptation, dataset.validation,
                                cache_training_config(cfg), adapt=False, seed=cfg.seed)
        runs['static'] = (result.traces, result.timeline, [])
        if adapt:
            result = run_adaptation(base, plan, variants, metrics, stream, profile, adaptation,
                                    dataset.validation, cache_training_config(cfg), adapt=True, seed=cfg.seed)
            runs['adaptive'] = (result.traces, result.timeline, result.events)
    else:
        traces, _ = simulate(stream, plan, profile, metrics, PROFILE_DRIVEN, base, seed=cfg.seed)
        runs['static'] = (traces, hit_timeline(traces, adaptation.retrain_interval_min), [])
        if adapt:
            print("⚠️  Adaptation needs model-driven simulation; only the static run was produced")

    summary = {'mode': mode, 'total_latency_ms': profile.total}
    for name, (traces, _, events) in runs.items():
        summary[name] = summarize(traces, profile.total)
        summary[name]['retrain_events'] = events
    write_traces(out / TRACES_STATIC_FILE, runs['static'][0], chash)
    if 'adaptive' in runs:
        write_traces(out / TRACES_ADAPTIVE_FILE, runs['adaptive'][0], chash)
    write_json(out / SUMMARY_FILE, stamp(summary, "latebind-summary", chash))
    write_csv(out / LATENCY_CDF_FILE, ('mode', 'latency_ms', 'fraction'),
              ((name, lat, frac) for name, (traces, _, _) in runs.items() for lat, frac in latency_cdf(traces)),
              chash)
    write_timeline(out / HIT_TIMELINE_FILE, {name: timeline for name, (_, timeline, _) in runs.items()}, chash)

    print_section(f"SIMULATION ({mode}-driven)")
    for name in runs:
        s = summary[name]
        print(f"{name:<9} requests={s['requests']} avg={s['avg_latency_ms']:.3f} ms "
              f"p99={s['p99_latency_ms']:.3f} ms hit={s['hit_fraction']:.3f} "
              f"agreement={s['agreement_with_base']:.4f} speedup={s['speedup']:.3f}x")
    print("\n✓ Traces, summary, latency CDF and hit timeline written")


def cmd_plan(cfg: ExperimentConfig, out: Path, chash: str, replan: bool = False):
    """SLO sweep over the DAG for both modes; audit log of the selected mode"""
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.planner
    dag = load_dag(dag_path(cfg))
    oracle = cache_hit_oracle(p.cached_node, p.hit_probability, p.hit_latency_ms)
    rows, audits = slo_sweep(dag, p.slos, p.policy, oracle, p.queries, cfg.seed, p.audit_queries)

    write_csv(out / PLAN_SUMMARY_FILE,
              ('slo_ms', 'replan', 'queries', 'mean_accuracy', 'mean_expected_accuracy', 'mean_latency_ms',
               'slo_violations', 'slo_risk_queries'),
              ((r['slo_ms'], int(r['replan']), r['queries'], r['mean_accuracy'], r['mean_expected_accuracy'],
                r['mean_latency_ms'], r['slo_violations'], r['slo_risk_queries']) for r in rows), chash)
    write_json(out / PLAN_AUDIT_FILE, stamp({'dag': dag.name, 'policy': p.policy, 'replan': replan,
                                             'queries': [a for a in audits if a['replan'] == replan]},
                                            "latebind-plan-audit", chash))

    print_section(f"QUERY PLANNING ({dag.name}, {p.policy} split, {p.queries} queries per SLO)")
    print(f"{'SLO ms':>7} {'static acc':>11} {'replan acc':>11} {'static ms':>10} {'replan ms':>10} {'at risk':>8}")
    by_slo = {}
    for r in rows:
        by_slo.setdefault(r['slo_ms'], {})[r['replan']] = r
    for slo, pair in by_slo.items():
        print(f"{slo:7.1f} {pair[False]['mean_accuracy']:11.4f} {pair[True]['mean_accuracy']:11.4f} "
              f"{pair[False]['mean_latency_ms']:10.2f} {pair[True]['mean_latency_ms']:10.2f} "
              f"{pair[False]['slo_risk_queries']:8d}")
    print("\n✓ Planner summary and audit log written")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Learned caches for late-binding DNN inference')
    parser.add_argument('command', choices=['init', 'prepare', 'explore', 'compose', 'simulate', 'plan'])
    parser.add_argument('--config', help='Experiment config (default: $LATEBIND_CONFIG or configs/experiment.json)')
    parser.add_argument('--out', help='Output directory (default: $LATEBIND_OUT_DIR or runs/default)')
    parser.add_argument('--seed', type=int, help='Override the config seed')
    parser.add_argument('--adapt', action='store_true', help='simulate: also run with cache adaptation')
    parser.add_argument('--replan', action='store_true', help='plan: write the audit log of the replanning mode')
    parser.add_argument('--fixture', choices=['tradeoff', 'tradeoff-example'],
                        help='explore: load published trade-off metrics instead of training')
    parser.add_argument('--hardware', choices=['cpu', 'gpu'], default='cpu',
                        help='explore: lookup latency column of the fixture (default: cpu)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        if args.command == 'init':
            cmd_init(Path(args.out or 'configs'))
            return EXIT_OK

        config_path, out = default_paths(args.config, args.out)
        cfg = with_seed(load_config(config_path), args.seed)
        chash = config_hash(cfg)

        if args.command == 'prepare':
            cmd_prepare(cfg, out, chash)
        elif args.command == 'explore':
            cmd_explore(cfg, out, chash, args.fixture, args.hardware)
        elif args.command == 'compose':
            cmd_compose(cfg, out, chash)
        elif args.command == 'simulate':
            cmd_simulate(cfg, out, chash, args.adapt)
        elif args.command == 'plan':
            cmd_plan(cfg, out, chash, args.replan)
        write_manifest(out, chash)
        return EXIT_OK

    except (ConfigError, DagError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasiblePlanError as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MissingArtifactError as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_MISSING
    except ArtifactFormatError as e:
        print(f"✗ Unreadable artifact: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
