"""
Cache Composition - Choosing which cache variants to deploy
Latency gain and score, effective hit rates, expected latency, constraint
checks, relaxed score maximization (branch-and-bound) and exact enumeration
"""

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from baselib import LayerProfile
from cachelib import VariantMetrics
from reportlib import read_json, stamp, write_json

logger = logging.getLogger(__name__)

DEFAULT_ACCURACY_THRESHOLD = 0.97
DEFAULT_MEMORY_BUDGET_MB = 1.0
DEFAULT_ALPHA = 0.2
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(11))
MAX_ENUMERATION = 10 ** 7
EPS = 1e-12

PLAN_FORMAT = "latebind-plan"

MetricsIndex = Dict[Tuple[int, int], VariantMetrics]


class MissingMetricsError(KeyError):
    """A plan references a (layer, variant) with no metrics"""


class InstanceTooLargeError(ValueError):
    """Exact enumeration would exceed the size guard"""


class InfeasiblePlanError(ValueError):
    """No feasible plan, or a plan that fails its constraints"""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class ComposerConfig:
    accuracy_threshold: float = DEFAULT_ACCURACY_THRESHOLD
    memory_budget_mb: float = DEFAULT_MEMORY_BUDGET_MB
    alpha: Union[float, str] = DEFAULT_ALPHA
    max_concurrent_lookups: int = 1
    alpha_grid: Tuple[float, ...] = ALPHA_GRID

    def __post_init__(self):
        if not 0.0 < self.accuracy_threshold <= 1.0:
            raise ValueError(f"accuracy_threshold must be in (0, 1], got {self.accuracy_threshold}")
        if isinstance(self.alpha, str):
            if self.alpha != "sweep":
                raise ValueError(f"alpha must be a number in [0, 1] or 'sweep', got {self.alpha!r}")
        elif not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.max_concurrent_lookups != 1:
            raise ValueError("Only one concurrent cache lookup is supported")
        if not self.alpha_grid:
            raise ValueError("alpha_grid must be nonempty")


@dataclass(frozen=True)
class SelectionPlan:
    chosen: Tuple[Tuple[int, int], ...] = ()
    alpha: Optional[float] = None
    method: str = "manual"

    def __post_init__(self):
        object.__setattr__(self, 'chosen', tuple(sorted((int(i), int(j)) for i, j in self.chosen)))

    @property
    def layers(self) -> List[int]:
        return [layer for layer, _ in self.chosen]

    def next_links(self, num_layers: int) -> Dict[Tuple[int, int], int]:
        """Next chosen layer after each choice (num_layers + 1 stands for the end of the network)"""
        links = {}
        for k, key in enumerate(self.chosen):
            links[key] = self.chosen[k + 1][0] if k + 1 < len(self.chosen) else num_layers + 1
        return links

    def __len__(self):
        return len(self.chosen)


@dataclass
class Verdict:
    feasible: bool
    violations: List[str] = field(default_factory=list)


def index_metrics(rows: Union[Sequence[VariantMetrics], MetricsIndex]) -> MetricsIndex:
    if isinstance(rows, dict):
        return rows
    return {row.key: row for row in rows}


def _plan_rows(plan: SelectionPlan, metrics) -> List[VariantMetrics]:
    index = index_metrics(metrics)
    missing = [key for key in plan.chosen if key not in index]
    if missing:
        raise MissingMetricsError(f"No metrics for {', '.join(f'L{i}_V{j}' for i, j in missing)}")
    return [index[key] for key in plan.chosen]


def latency_gain(profile: LayerProfile, i: int, lookup_ms: float) -> float:
    """Total base latency over latency-to-hit at block i"""
    if not 1 <= i <= profile.num_layers:
        raise ValueError(f"layer {i} outside 1..{profile.num_layers}")
    if lookup_ms < 0:
        raise ValueError(f"lookup latency must be >= 0, got {lookup_ms}")
    return profile.total / (profile.prefix(i) + lookup_ms)


def score(hit_rate: float, gain: float, alpha: float) -> float:
    return alpha * hit_rate + (1.0 - alpha) * gain


def _effective(hit_rates: Sequence[float], labels: Sequence[str] = ()) -> List[float]:
    effective = []
    absorbed = 0.0
    for k, hit in enumerate(hit_rates):
        eh = hit - absorbed
        if eh < 0:
            logger.warning("effective hit rate of %s is %.4f < 0, clamped to 0",
                           labels[k] if labels else f"choice {k + 1}", eh)
            eh = 0.0
        effective.append(eh)
        absorbed += eh
    return effective


def effective_hit_rates(plan: SelectionPlan, metrics) -> List[float]:
    """EH per chosen variant in layer order: its H net of shallower caches' hits"""
    rows = _plan_rows(plan, metrics)
    return _effective([row.hit_rate for row in rows], [f"L{r.layer}_V{r.variant_id}" for r in rows])


def _expected_latency(rows: Sequence[VariantMetrics], eh: Sequence[float], profile: LayerProfile) -> float:
    total = profile.total
    latency = sum(e * (profile.prefix(row.layer) + row.lookup_ms) for row, e in zip(rows, eh))
    return latency + (1.0 - sum(eh)) * total


def _plan_accuracy(rows: Sequence[VariantMetrics], eh: Sequence[float]) -> float:
    return sum(e * row.accuracy for row, e in zip(rows, eh)) + (1.0 - sum(eh))


def expected_latency(plan: SelectionPlan, metrics, profile: LayerProfile) -> float:
    """Mean request latency: hits finish at prefix + lookup, misses run the whole network"""
    rows = _plan_rows(plan, metrics)
    return _expected_latency(rows, effective_hit_rates(plan, metrics), profile)


def plan_accuracy(plan: SelectionPlan, metrics) -> float:
    """Agreement with the base model; misses count as agreeing"""
    rows = _plan_rows(plan, metrics)
    return _plan_accuracy(rows, effective_hit_rates(plan, metrics))


def _violations(rows: Sequence[VariantMetrics], profile: LayerProfile,
                cfg: Optional[ComposerConfig]) -> List[str]:
    violations = []
    n = profile.num_layers

    seen = {}
    for row in rows:
        seen[row.layer] = seen.get(row.layer, 0) + 1
        if not 1 <= row.layer <= n:
            violations.append(f"layer {row.layer}: outside 1..{n}")
    for layer, count in sorted(seen.items()):
        if count > 1:
            violations.append(f"layer {layer}: {count} variants chosen (at most one per layer)")

    for k, row in enumerate(rows):
        if not 1 <= row.layer <= n:
            continue
        nxt = rows[k + 1].layer if k + 1 < len(rows) else n
        window = profile.span(row.layer, min(nxt, n))
        if row.lookup_ms > window + EPS:
            end = f"layer {nxt}" if k + 1 < len(rows) else "the end of the network"
            violations.append(f"L{row.layer}_V{row.variant_id}: lookup {row.lookup_ms:.4f} ms exceeds "
                              f"{window:.4f} ms of compute before {end}")

    if cfg is not None:
        memory = sum(row.memory_mb for row in rows)
        if memory > cfg.memory_budget_mb + EPS:
            violations.append(f"memory {memory:.4f} MB exceeds budget {cfg.memory_budget_mb:.4f} MB")
        accuracy = _plan_accuracy(rows, _effective([row.hit_rate for row in rows]))
        if accuracy < cfg.accuracy_threshold - EPS:
            violations.append(f"plan accuracy {accuracy:.4f} below threshold {cfg.accuracy_threshold:.4f}")
    return violations


def check_constraints(plan: SelectionPlan, metrics, profile: LayerProfile,
                      cfg: Optional[ComposerConfig] = None) -> Verdict:
    """
    Check memory, lookup/compute overlap, one-variant-per-layer and accuracy

    Without a ComposerConfig only the structural constraints (overlap and one
    per layer) are checked.
    """
    violations = _violations(_plan_rows(plan, metrics), profile, cfg)
    return Verdict(not violations, violations)


def _better(candidate: Tuple[float, int, float], best: Optional[Tuple[float, int, float]], maximize: bool) -> bool:
    """Lexicographic comparison on (objective, variant count, memory) with objective tolerance"""
    if best is None:
        return True
    value, count, memory = candidate
    best_value, best_count, best_memory = best
    if abs(value - best_value) > EPS:
        return value > best_value if maximize else value < best_value
    if count != best_count:
        return count < best_count
    return memory < best_memory - EPS


def compose_relaxed(metrics, profile: LayerProfile, cfg: ComposerConfig,
                    alpha: Optional[float] = None) -> SelectionPlan:
    """
    Score-maximizing plan

    Drops variants below the accuracy threshold, scores the rest with
    alpha*H + (1-alpha)*LG, then maximizes the summed score under the memory,
    overlap and one-per-layer constraints by depth-first branch-and-bound over
    layers. Ties go to fewer variants, then lower memory.

    Args:
        metrics: VariantMetrics rows (or an index of them)
        profile: Base model layer latencies
        cfg: Composer settings
        alpha: Score weight; defaults to cfg.alpha ('sweep' delegates to sweep_alpha)

    Returns:
        SelectionPlan (possibly empty)
    """
    if cfg.memory_budget_mb < 0:
        raise InfeasiblePlanError(f"Negative memory budget {cfg.memory_budget_mb}")
    if alpha is None:
        if cfg.alpha == "sweep":
            return sweep_alpha(metrics, profile, cfg).plan
        alpha = cfg.alpha

    n = profile.num_layers
    by_layer: Dict[int, List[Tuple[VariantMetrics, float]]] = {}
    for row in index_metrics(metrics).values():
        if row.accuracy < cfg.accuracy_threshold or not 1 <= row.layer <= n:
            continue
        # a lookup longer than the remaining compute can never be placed
        if row.lookup_ms > profile.span(row.layer, n) + EPS:
            continue
        s = score(row.hit_rate, latency_gain(profile, row.layer, row.lookup_ms), alpha)
        by_layer.setdefault(row.layer, []).append((row, s))

    layers = sorted(by_layer)
    for layer in layers:
        by_layer[layer].sort(key=lambda pair: (-pair[1], pair[0].variant_id))
    optimistic = [max(0.0, max(s for _, s in by_layer[layer])) for layer in layers]
    suffix = [sum(optimistic[k:]) for k in range(len(layers) + 1)]

    best_key, best_choice = None, ()
    # state: (level, last layer, last lookup ms, memory, score, choices)
    stack = deque([(0, None, 0.0, 0.0, 0.0, ())])
    while stack:
        level, last_layer, last_t, memory, total, choices = stack.pop()
        if best_key is not None and total + suffix[level] < best_key[0] - EPS:
            continue
        if level == len(layers):
            key = (total, len(choices), memory)
            if _better(key, best_key, maximize=True):
                best_key, best_choice = key, choices
            continue

        layer = layers[level]
        stack.append((level + 1, last_layer, last_t, memory, total, choices))
        if last_layer is not None and last_t > profile.span(last_layer, layer) + EPS:
            continue
        for row, s in reversed(by_layer[layer]):
            if memory + row.memory_mb > cfg.memory_budget_mb + EPS:
                continue
            stack.append((level + 1, layer, row.lookup_ms, memory + row.memory_mb, total + s,
                          choices + (row.key,)))

    return SelectionPlan(best_choice, alpha, "relaxed")


def relaxed_objective(plan: SelectionPlan, metrics, profile: LayerProfile, alpha: float) -> float:
    """Summed score of a plan's variants"""
    return sum(score(row.hit_rate, latency_gain(profile, row.layer, row.lookup_ms), alpha)
               for row in _plan_rows(plan, metrics))


def enumeration_size(metrics) -> int:
    """(K+1)^N over the layers that have variants"""
    counts: Dict[int, int] = {}
    for row in index_metrics(metrics).values():
        counts[row.layer] = counts.get(row.layer, 0) + 1
    if not counts:
        return 1
    return (max(counts.values()) + 1) ** len(counts)


def compose_exact(metrics, profile: LayerProfile, cfg: ComposerConfig) -> SelectionPlan:
    """
    Minimum expected-latency plan by enumerating every selection

    Every selection that passes check_constraints (accuracy included) is
    evaluated. Ties go to fewer variants, then lower memory.
    """
    if cfg.memory_budget_mb < 0:
        raise InfeasiblePlanError(f"Negative memory budget {cfg.memory_budget_mb}")
    index = index_metrics(metrics)
    size = enumeration_size(index)
    if size > MAX_ENUMERATION:
        raise InstanceTooLargeError(f"{size} selections exceed the enumeration limit {MAX_ENUMERATION}")

    by_layer: Dict[int, List[VariantMetrics]] = {}
    for row in index.values():
        by_layer.setdefault(row.layer, []).append(row)
    options = [[None] + sorted(by_layer[layer], key=lambda r: r.variant_id) for layer in sorted(by_layer)]

    best_key, best_choice = None, ()
    for selection in itertools.product(*options):
        rows = [row for row in selection if row is not None]
        if _violations(rows, profile, cfg):
            continue
        eh = _effective([row.hit_rate for row in rows])
        key = (_expected_latency(rows, eh, profile), len(rows), sum(row.memory_mb for row in rows))
        if _better(key, best_key, maximize=False):
            best_key, best_choice = key, tuple(row.key for row in rows)

    return SelectionPlan(best_choice, None, "exact")


@dataclass
class AlphaPoint:
    alpha: float
    plan: SelectionPlan
    expected_latency: float
    plan_accuracy: float
    memory_mb: float


@dataclass
class AlphaSweep:
    best_alpha: float
    plan: SelectionPlan
    curve: List[AlphaPoint]


def sweep_alpha(metrics, profile: LayerProfile, cfg: ComposerConfig,
                grid: Optional[Sequence[float]] = None) -> AlphaSweep:
    """Relaxed plan per alpha; keep the lowest expected latency (first alpha on ties)"""
    grid = list(grid if grid is not None else cfg.alpha_grid)
    if not grid:
        raise ValueError("alpha grid is empty")
    index = index_metrics(metrics)

    curve = []
    best: Optional[AlphaPoint] = None
    for alpha in grid:
        plan = compose_relaxed(index, profile, cfg, alpha=alpha)
        rows = _plan_rows(plan, index)
        point = AlphaPoint(alpha, plan, expected_latency(plan, index, profile),
                           plan_accuracy(plan, index), sum(row.memory_mb for row in rows))
        curve.append(point)
        if point.plan_accuracy < cfg.accuracy_threshold - EPS:
            continue
        if best is None or point.expected_latency < best.expected_latency - EPS:
            best = point

    if best is None:
        best = AlphaPoint(grid[0], SelectionPlan((), grid[0], "relaxed"), profile.total, 1.0, 0.0)
    return AlphaSweep(best.alpha, best.plan, curve)


def sweep_accuracy_targets(metrics, profile: LayerProfile, cfg: ComposerConfig,
                           targets: Sequence[float]) -> List[Dict]:
    """Relaxed (and, when small enough, exact) plans for a range of accuracy targets"""
    index = index_metrics(metrics)
    exact_ok = enumeration_size(index) <= MAX_ENUMERATION
    rows = []
    for target in targets:
        target_cfg = replace(cfg, accuracy_threshold=target)
        relaxed = compose_relaxed(index, profile, target_cfg)
        entry = {
            'target': target,
            'relaxed_plan': [f"L{i}_V{j}" for i, j in relaxed.chosen],
            'relaxed_latency_ms': expected_latency(relaxed, index, profile),
            'relaxed_accuracy': plan_accuracy(relaxed, index),
            'exact_plan': None,
            'exact_latency_ms': None,
        }
        if exact_ok:
            exact = compose_exact(index, profile, target_cfg)
            entry['exact_plan'] = [f"L{i}_V{j}" for i, j in exact.chosen]
            entry['exact_latency_ms'] = expected_latency(exact, index, profile)
        rows.append(entry)
    return rows


def plan_to_dict(plan: SelectionPlan, metrics, profile: LayerProfile) -> Dict:
    index = index_metrics(metrics)
    rows = _plan_rows(plan, index)
    eh = effective_hit_rates(plan, index)
    return {
        'method': plan.method,
        'alpha': plan.alpha,
        'chosen': [{'layer': row.layer, 'variant_id': row.variant_id, 'arch': row.arch,
                    'effective_hit_rate': e, 'hit_rate': row.hit_rate, 'accuracy': row.accuracy,
                    'lookup_ms': row.lookup_ms, 'memory_mb': row.memory_mb}
                   for row, e in zip(rows, eh)],
        'expected_latency_ms': _expected_latency(rows, eh, profile),
        'plan_accuracy': _plan_accuracy(rows, eh),
        'memory_mb': sum(row.memory_mb for row in rows),
        'total_latency_ms': profile.total,
    }


def write_plan(path, plan: SelectionPlan, metrics, profile: LayerProfile, config_hash: str = ''):
    write_json(path, stamp(plan_to_dict(plan, metrics, profile), PLAN_FORMAT, config_hash))


def read_plan(path) -> SelectionPlan:
    payload = read_json(path, PLAN_FORMAT)
    return SelectionPlan(tuple((c['layer'], c['variant_id']) for c in payload['chosen']),
                         payload.get('alpha'), payload.get('method', 'manual'))
