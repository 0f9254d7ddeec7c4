"""
Validate Run Artifacts
Checks an output directory against its manifest and the metric ranges
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from reportlib import MANIFEST_FILE, load_run, print_section, validate_run


def validate_artifacts(out_dir: str = "runs/default") -> bool:
    """Validate a run directory; print a report and return success"""

    print(f"Validating {out_dir}...\n")
    path = Path(out_dir)
    if not path.is_dir():
        print(f"❌ FATAL: {out_dir} is not a directory")
        return False

    errors, warnings = validate_run(path)
    run = load_run(path)

    print_section("ARTIFACTS")
    manifest = run.get('manifest') or {}
    files = manifest.get('files', {})
    print(f"Files in {MANIFEST_FILE}: {len(files)}")
    for key in ('profile', 'metrics', 'plan', 'compose_report', 'summary', 'plan_audit'):
        print(f"  {'✓' if run.get(key) else '·'} {key}")

    if run.get('metrics'):
        rows = run['metrics'].get('rows', [])
        print(f"\nMetric rows: {len(rows)} (source: {run['metrics'].get('source', '?')})")
    if run.get('plan'):
        plan = run['plan']
        chosen = ', '.join(f"L{c['layer']}_V{c['variant_id']}" for c in plan.get('chosen', [])) or '(empty)'
        print(f"Plan: {chosen}, expected latency {plan.get('expected_latency_ms', 0.0):.4f} ms")

    print_section("VALIDATION SUMMARY")

    if errors:
        print(f"\n❌ ERRORS ({len(errors)}):")
        for err in errors[:10]:
            print(f"  - {err}")
        if len(errors) > 10:
            print(f"  ... and {len(errors)-10} more")
        return False

    if warnings:
        print(f"\n⚠️  WARNINGS ({len(warnings)}):")
        for warn in warnings:
            print(f"  - {warn}")

    print(f"\n✓ Validation passed!")
    print(f"  Files: {len(files)}")
    print(f"  Config hash: {manifest.get('config_hash', '?')}")

    return True


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Validate a latebind run directory')
    parser.add_argument(
        'out_dir',
        nargs='?',
        default='runs/default',
        help='Output directory to validate'
    )

    args = parser.parse_args()

    success = validate_artifacts(args.out_dir)
    sys.exit(0 if success else 1)
