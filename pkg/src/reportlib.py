"""
Run Artifacts & Reports - Output directory plumbing
Stamped JSON/CSV writers, SHA-256 manifest, run validation and loading
"""

import csv
import gzip
import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

TOOL_VERSION = "0.1.0"
SCHEMA_VERSION = 1
CSV_MARKER = "# latebind"

# Output directory layout
DATASET_FILE = "dataset.csv"
BASE_MODEL_FILE = "base_model.json.gz"
PROFILE_FILE = "profile.json"
VARIANTS_DIR = "variants"
METRICS_FILE = "metrics.json"
PLAN_FILE = "plan.json"
COMPOSE_REPORT_FILE = "compose_report.json"
ALPHA_CURVE_FILE = "alpha_curve.csv"
TRACES_STATIC_FILE = "traces_static.csv"
TRACES_ADAPTIVE_FILE = "traces_adaptive.csv"
SUMMARY_FILE = "summary.json"
LATENCY_CDF_FILE = "latency_cdf.csv"
HIT_TIMELINE_FILE = "hit_timeline.csv"
PLAN_AUDIT_FILE = "plan_audit.json"
PLAN_SUMMARY_FILE = "plan_summary.csv"
MANIFEST_FILE = "manifest.json"


class MissingArtifactError(FileNotFoundError):
    """A command needs an output file an earlier command has not written"""


class ArtifactFormatError(ValueError):
    """An output file exists but carries the wrong format or schema version"""


def require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact: {path}")
    return path


def stamp(payload: Dict, fmt: str, config_hash: str) -> Dict:
    """Prefix a JSON payload with format, schema version, tool version and config hash"""
    stamped = {
        'format': fmt,
        'version': SCHEMA_VERSION,
        'tool_version': TOOL_VERSION,
        'config_hash': config_hash,
    }
    stamped.update(payload)
    return stamped


def write_json(path, payload: Dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write('\n')


def read_json(path, fmt: Optional[str] = None) -> Dict:
    """
    Load a stamped JSON artifact

    Args:
        path: File to read (.gz files are decompressed)
        fmt: Expected 'format' stamp (checked when given)

    Returns:
        Parsed payload
    """
    path = require(path)
    opener = gzip.open if path.name.endswith('.gz') else open
    with opener(path, 'rt', encoding='utf-8') as f:
        payload = json.load(f)
    if fmt is not None and payload.get('format') != fmt:
        raise ArtifactFormatError(f"{path}: expected format '{fmt}', found '{payload.get('format')}'")
    if payload.get('version', SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported schema version {payload.get('version')}")
    return payload


def csv_header_line(config_hash: str) -> str:
    return f"{CSV_MARKER} {TOOL_VERSION} config={config_hash}"


def parse_header_line(line: str) -> Dict[str, str]:
    if not line.startswith(CSV_MARKER):
        raise ArtifactFormatError(f"Not a latebind CSV header: {line.strip()!r}")
    parts = line.strip().split()
    meta = {'tool_version': parts[2] if len(parts) > 2 else ''}
    for part in parts[3:]:
        key, _, value = part.partition('=')
        meta[key] = value
    return meta


def write_csv(path, columns: Sequence[str], rows, config_hash: str):
    """Write rows (sequences in column order) under a stamped comment header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(csv_header_line(config_hash) + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """
    Read a stamped CSV

    Returns:
        Tuple of (header metadata, rows as dicts of strings)
    """
    with open(require(path), 'r', encoding='utf-8', newline='') as f:
        meta = parse_header_line(f.readline())
        reader = csv.DictReader(f)
        return meta, list(reader)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _run_files(out_dir: Path) -> List[str]:
    files = []
    for root, _, names in os.walk(out_dir):
        for name in names:
            rel = (Path(root) / name).relative_to(out_dir).as_posix()
            if rel != MANIFEST_FILE:
                files.append(rel)
    return sorted(files)


def write_manifest(out_dir, config_hash: str) -> Dict:
    """Hash every file in the output directory into manifest.json"""
    out_dir = Path(out_dir)
    manifest = stamp({'files': {rel: file_sha256(out_dir / rel) for rel in _run_files(out_dir)}},
                     'latebind-manifest', config_hash)
    write_json(out_dir / MANIFEST_FILE, manifest)
    return manifest


def verify_manifest(out_dir) -> List[str]:
    """Return a list of problems (missing, changed or unlisted files)"""
    out_dir = Path(out_dir)
    manifest = read_json(out_dir / MANIFEST_FILE, 'latebind-manifest')
    problems = []
    listed = manifest.get('files', {})
    for rel, digest in listed.items():
        path = out_dir / rel
        if not path.exists():
            problems.append(f"{rel}: listed in manifest but missing")
        elif file_sha256(path) != digest:
            problems.append(f"{rel}: hash mismatch")
    for rel in _run_files(out_dir):
        if rel not in listed:
            problems.append(f"{rel}: not in manifest")
    return problems


def progress_bar(done: int, total: int, width: int = 40) -> str:
    filled = int(width * done / total) if total else width
    pct = done / total * 100 if total else 100.0
    return f"{'█' * filled}{'░' * (width - filled)} {done}/{total} ({pct:.1f}%)"


def print_section(title: str):
    print(f"\n{'=' * 60}")
    print(title)
    print('=' * 60)


def _check_range(errors: List[str], where: str, name: str, value, lo: float, hi: float = float('inf')):
    if value is None or not lo <= value <= hi:
        errors.append(f"{where}: {name}={value} outside [{lo}, {hi}]")


def validate_run(out_dir) -> Tuple[List[str], List[str]]:
    """
    Check an output directory: manifest hashes, stamps and metric ranges

    Returns:
        Tuple of (errors, warnings)
    """
    out_dir = Path(out_dir)
    errors, warnings = [], []

    if not (out_dir / MANIFEST_FILE).exists():
        errors.append(f"{MANIFEST_FILE} missing")
    else:
        errors.extend(verify_manifest(out_dir))

    hashes = set()
    for rel in _run_files(out_dir):
        path = out_dir / rel
        if rel.endswith(('.json', '.json.gz')):
            try:
                payload = read_json(path)
            except ValueError as e:
                errors.append(str(e))
                continue
            if 'tool_version' not in payload:
                errors.append(f"{rel}: no tool_version stamp")
            if 'config_hash' not in payload:
                errors.append(f"{rel}: no config_hash stamp")
            else:
                hashes.add(payload['config_hash'])
        elif rel.endswith('.csv'):
            with open(path, 'r', encoding='utf-8') as f:
                first = f.readline()
            if not first.startswith(CSV_MARKER):
                errors.append(f"{rel}: missing latebind header line")
            else:
                hashes.add(parse_header_line(first).get('config', ''))
    if len(hashes) > 1:
        warnings.append(f"Outputs come from {len(hashes)} different configs")

    metrics_path = out_dir / METRICS_FILE
    if metrics_path.exists():
        rows = read_json(metrics_path).get('rows', [])
        if not rows:
            warnings.append("metrics.json has no rows")
        for row in rows:
            where = f"metrics L{row.get('layer')}_V{row.get('variant_id')}"
            _check_range(errors, where, 'hit_rate', row.get('hit_rate'), 0.0, 1.0)
            _check_range(errors, where, 'accuracy', row.get('accuracy'), 0.0, 1.0)
            _check_range(errors, where, 'lookup_ms', row.get('lookup_ms'), 0.0)
            _check_range(errors, where, 'memory_mb', row.get('memory_mb'), 0.0)

    plan_path = out_dir / PLAN_FILE
    if plan_path.exists():
        plan = read_json(plan_path)
        _check_range(errors, 'plan', 'plan_accuracy', plan.get('plan_accuracy'), 0.0, 1.0)
        eh_total = sum(c.get('effective_hit_rate', 0.0) for c in plan.get('chosen', []))
        if eh_total > 1.0 + 1e-9:
            errors.append(f"plan: effective hit rates sum to {eh_total:.4f} > 1")

    return errors, warnings


def load_run(out_dir) -> Dict:
    """Load whatever a run directory holds; absent artifacts map to None"""
    out_dir = Path(out_dir)
    run = {}
    for key, name in [('profile', PROFILE_FILE), ('metrics', METRICS_FILE), ('plan', PLAN_FILE),
                      ('compose_report', COMPOSE_REPORT_FILE), ('summary', SUMMARY_FILE),
                      ('plan_audit', PLAN_AUDIT_FILE), ('manifest', MANIFEST_FILE)]:
        path = out_dir / name
        run[key] = read_json(path) if path.exists() else None
    for key, name in [('alpha_curve', ALPHA_CURVE_FILE), ('latency_cdf', LATENCY_CDF_FILE),
                      ('hit_timeline', HIT_TIMELINE_FILE), ('plan_summary', PLAN_SUMMARY_FILE)]:
        path = out_dir / name
        run[key] = read_csv(path)[1] if path.exists() else None
    return run
