"""
Serving Simulation - Requests through the base model and its caches
Zipfian rotating workloads, model- and profile-driven serving under the
asynchronous lookup contract, online cache adaptation and trace reports
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from baselib import BaseModel, LayerProfile, Split, forward_with_taps
from cachelib import CacheTrainingConfig, CacheVariant, fit_variant, lookup
from composelib import (ComposerConfig, InfeasiblePlanError, SelectionPlan, check_constraints,
                        effective_hit_rates, index_metrics)
from nnlib import DivergenceError, TrainConfig
from reportlib import write_csv

logger = logging.getLogger(__name__)

MODEL_DRIVEN = "model"
PROFILE_DRIVEN = "profile"
MISS = 0

DEFAULT_ZIPF_SKEW = 1.5
DEFAULT_ROTATION_PERIOD_MIN = 15.0
DEFAULT_REQUEST_RATE = 2.0
DEFAULT_DURATION_MIN = 120.0

TRACE_COLUMNS = ('request_id', 'timestamp_s', 'true_class', 'base_pred', 'served_pred', 'hit_layer', 'latency_ms')
TIMELINE_COLUMNS = ('interval', 'start_min', 'requests', 'hits', 'hit_rate', 'retrained')


class WorkloadError(ValueError):
    """Workload spec or class pool cannot produce a stream"""


@dataclass(frozen=True)
class WorkloadSpec:
    num_classes: int = 10
    zipf_skew: float = DEFAULT_ZIPF_SKEW
    rotation_period_min: float = DEFAULT_ROTATION_PERIOD_MIN
    request_rate_per_s: float = DEFAULT_REQUEST_RATE
    duration_min: float = DEFAULT_DURATION_MIN
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise WorkloadError("num_classes must be positive")
        if not self.zipf_skew > 0:
            raise WorkloadError(f"zipf_skew must be > 0, got {self.zipf_skew}")
        if not self.rotation_period_min > 0:
            raise WorkloadError(f"rotation_period_min must be > 0, got {self.rotation_period_min}")
        if not (self.request_rate_per_s > 0 and self.duration_min > 0):
            raise WorkloadError("request rate and duration must be > 0")


@dataclass(frozen=True)
class AdaptationConfig:
    sample_rate: float = 0.2
    window_min: float = 60.0
    retrain_interval_min: float = 15.0
    recency_decay: float = 0.7
    mix_fraction: float = 0.5
    retrain_epochs: int = 5
    learning_rate: float = 0.002
    momentum: float = 0.9
    batch_size: int = 32
    swap_delay_min: float = 0.0

    def __post_init__(self):
        # 0 is accepted and disables sampling
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError(f"sample_rate must be in [0, 1], got {self.sample_rate}")
        if not (self.window_min > 0 and self.retrain_interval_min > 0):
            raise ValueError("window_min and retrain_interval_min must be > 0")
        if not 0.0 < self.recency_decay <= 1.0:
            raise ValueError(f"recency_decay must be in (0, 1], got {self.recency_decay}")
        if not 0.0 <= self.mix_fraction <= 1.0:
            raise ValueError(f"mix_fraction must be in [0, 1], got {self.mix_fraction}")
        if self.retrain_epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("retrain_epochs, batch_size and learning_rate must be positive")
        if self.swap_delay_min < 0:
            raise ValueError(f"swap_delay_min must be >= 0, got {self.swap_delay_min}")

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.momentum, self.retrain_epochs, self.batch_size, seed)


@dataclass
class RequestStream:
    timestamps_s: np.ndarray
    classes: np.ndarray
    num_classes: int
    inputs: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.classes.shape[0])

    @property
    def request_ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)


@dataclass(frozen=True)
class RequestTrace:
    request_id: int
    timestamp_s: float
    true_class: int
    base_pred: int
    served_pred: int
    hit_layer: int
    latency_ms: float

    @property
    def hit(self) -> bool:
        return self.hit_layer != MISS


@dataclass
class Traces:
    """Columnar request traces; hit_layer 0 marks a miss"""
    request_id: np.ndarray
    timestamp_s: np.ndarray
    true_class: np.ndarray
    base_pred: np.ndarray
    served_pred: np.ndarray
    hit_layer: np.ndarray
    latency_ms: np.ndarray

    def __len__(self):
        return int(self.request_id.shape[0])

    def rows(self):
        for k in range(len(self)):
            yield RequestTrace(int(self.request_id[k]), float(self.timestamp_s[k]), int(self.true_class[k]),
                               int(self.base_pred[k]), int(self.served_pred[k]), int(self.hit_layer[k]),
                               float(self.latency_ms[k]))

    @classmethod
    def from_rows(cls, rows: Sequence[RequestTrace]) -> 'Traces':
        cols = list(zip(*[(r.request_id, r.timestamp_s, r.true_class, r.base_pred, r.served_pred,
                           r.hit_layer, r.latency_ms) for r in rows])) or [()] * 7
        ints = [np.asarray(c, dtype=np.int64) for c in cols]
        return cls(ints[0], np.asarray(cols[1], dtype=np.float64), ints[2], ints[3], ints[4], ints[5],
                   np.asarray(cols[6], dtype=np.float64))


def zipf_probabilities(num_classes: int, skew: float) -> np.ndarray:
    """P(rank k) proportional to k^-skew, ranks 1..num_classes"""
    weights = 1.0 / np.arange(1, num_classes + 1, dtype=np.float64) ** skew
    return weights / weights.sum()


def dominant_class(period_index: int, num_classes: int) -> int:
    return period_index % num_classes


def gen_workload(spec: WorkloadSpec, pool: Optional[Split] = None) -> RequestStream:
    """
    Timestamped request stream with a rotating Zipf class ranking

    Requests arrive every 1/rate seconds. In rotation period p the class of
    rank r is (p + r) mod C, so the dominant class advances each period.
    Inputs are drawn from the pool's samples of the request's class; with no
    pool the stream carries classes only (profile-driven serving).
    """
    n = int(round(spec.request_rate_per_s * spec.duration_min * 60.0))
    if n < 1:
        raise WorkloadError("Workload produces no requests")
    rng = np.random.default_rng(spec.seed)
    timestamps = np.arange(n, dtype=np.float64) / spec.request_rate_per_s
    periods = np.floor(timestamps / (spec.rotation_period_min * 60.0)).astype(np.int64)
    ranks = rng.choice(spec.num_classes, size=n, p=zipf_probabilities(spec.num_classes, spec.zipf_skew))
    classes = (periods + ranks) % spec.num_classes

    inputs = None
    if pool is not None:
        inputs = np.zeros((n, pool.inputs.shape[1]))
        for label in range(spec.num_classes):
            wanted = np.flatnonzero(classes == label)
            available = np.flatnonzero(pool.labels == label)
            if available.size == 0:
                raise WorkloadError(f"No pool samples for class {label}")
            if wanted.size:
                inputs[wanted] = pool.inputs[rng.choice(available, size=wanted.size)]
    return RequestStream(timestamps, classes, spec.num_classes, inputs)


def _require_feasible(plan: SelectionPlan, metrics, profile: LayerProfile, cfg: Optional[ComposerConfig]):
    verdict = check_constraints(plan, metrics, profile, cfg)
    if not verdict.feasible:
        raise InfeasiblePlanError("Plan violates its constraints: " + "; ".join(verdict.violations),
                                  verdict.violations)


def _serve_model(taps: List[np.ndarray], base_pred: np.ndarray, plan: SelectionPlan,
                 live: Dict[Tuple[int, int], CacheVariant], metrics, profile: LayerProfile):
    """First hit in layer order wins; misses run the whole network"""
    index = index_metrics(metrics)
    n = base_pred.shape[0]
    served = base_pred.copy()
    hit_layer = np.full(n, MISS, dtype=np.int64)
    latency = np.full(n, profile.total)
    remaining = np.ones(n, dtype=bool)
    for key in plan.chosen:
        layer = key[0]
        pending = np.flatnonzero(remaining)
        if pending.size == 0:
            break
        hits, pr = lookup(live[key], taps[layer - 1][pending])
        won = pending[hits]
        served[won] = np.argmax(pr[hits], axis=1)
        hit_layer[won] = layer
        latency[won] = profile.prefix(layer) + index[key].lookup_ms
        remaining[won] = False
    return served, hit_layer, latency


def simulate(stream: RequestStream, plan: SelectionPlan, profile: LayerProfile, metrics,
             mode: str = MODEL_DRIVEN, base: Optional[BaseModel] = None,
             variants: Optional[Dict[Tuple[int, int], CacheVariant]] = None,
             cfg: Optional[ComposerConfig] = None, seed: int = 0) -> Tuple[Traces, Dict]:
    """
    Serve a request stream with a deployed plan

    Args:
        stream: Requests (inputs required in model mode)
        plan: Deployed plan; must pass check_constraints
        profile: Layer latencies
        metrics: VariantMetrics rows (lookup latency, and EH/A in profile mode)
        mode: 'model' runs the networks; 'profile' samples hits from EH and correctness from A
        base: Base model (model mode; optional in profile mode where base prediction = true class)
        variants: Trained variants by (layer, variant id) (model mode)
        cfg: When given, memory and accuracy constraints are enforced too
        seed: Sampling seed for profile mode

    Returns:
        Tuple of (traces, summary)
    """
    _require_feasible(plan, metrics, profile, cfg)
    n = len(stream)
    if n == 0:
        raise WorkloadError("Empty request stream")

    if mode == MODEL_DRIVEN:
        if base is None or stream.inputs is None:
            raise ValueError("Model-driven simulation needs a base model and request inputs")
        missing = [key for key in plan.chosen if key not in (variants or {})]
        if missing:
            raise ValueError(f"No trained variants for {missing}")
        taps, probs = forward_with_taps(base, stream.inputs)
        base_pred = np.argmax(probs, axis=1)
        served, hit_layer, latency = _serve_model(taps, base_pred, plan, variants, metrics, profile)
    elif mode == PROFILE_DRIVEN:
        if base is not None and stream.inputs is not None:
            _, probs = forward_with_taps(base, stream.inputs)
            base_pred = np.argmax(probs, axis=1)
        else:
            base_pred = stream.classes.copy()
        served, hit_layer, latency = _serve_profile(base_pred, plan, metrics, profile, stream.num_classes, seed)
    else:
        raise ValueError(f"Unknown mode '{mode}'")

    traces = Traces(stream.request_ids, stream.timestamps_s.copy(), stream.classes.copy(),
                    base_pred, served, hit_layer, latency)
    return traces, summarize(traces, profile.total)


def _serve_profile(base_pred: np.ndarray, plan: SelectionPlan, metrics, profile: LayerProfile,
                   num_classes: int, seed: int):
    """Hit at a layer with probability EH / (1 - earlier EH) given no earlier hit"""
    index = index_metrics(metrics)
    rng = np.random.default_rng(seed)
    n = base_pred.shape[0]
    served = base_pred.copy()
    hit_layer = np.full(n, MISS, dtype=np.int64)
    latency = np.full(n, profile.total)
    remaining = np.ones(n, dtype=bool)
    absorbed = 0.0

    for key, eh in zip(plan.chosen, effective_hit_rates(plan, index)):
        row = index[key]
        left = 1.0 - absorbed
        conditional = eh / left if left > 1e-12 else 0.0
        draws = rng.random(n)
        correct = rng.random(n) < row.accuracy
        offsets = rng.integers(1, max(num_classes, 2), size=n)
        won = remaining & (draws < conditional)
        wrong = won & ~correct
        if num_classes > 1:
            served[wrong] = (base_pred[wrong] + offsets[wrong]) % num_classes
        hit_layer[won] = row.layer
        latency[won] = profile.prefix(row.layer) + row.lookup_ms
        remaining &= ~won
        absorbed += eh
    return served, hit_layer, latency


def summarize(traces: Traces, total_latency_ms: float) -> Dict:
    """
    Latency and accuracy report over a set of traces

    Args:
        traces: Nonempty traces
        total_latency_ms: Sum of the base model's layer latencies (speedup reference)
    """
    n = len(traces)
    if n == 0:
        raise ValueError("No traces to summarize")

    latency = traces.latency_ms
    hits = traces.hit_layer != MISS
    agree = traces.served_pred == traces.base_pred
    avg = float(latency.mean())

    per_layer = {}
    for layer in sorted(set(int(v) for v in traces.hit_layer[hits])):
        at = traces.hit_layer == layer
        per_layer[str(layer)] = {
            'requests': int(at.sum()),
            'share': float(at.mean()),
            'latency_ms': float(latency[at].mean()),
            'agreement': float(agree[at].mean()),
        }

    return {
        'requests': n,
        'avg_latency_ms': avg,
        'p50_latency_ms': float(np.percentile(latency, 50)),
        'p99_latency_ms': float(np.percentile(latency, 99)),
        'max_latency_ms': float(latency.max()),
        'agreement_with_base': float(agree.mean()),
        'ground_truth_accuracy': float(np.mean(traces.served_pred == traces.true_class)),
        'base_ground_truth_accuracy': float(np.mean(traces.base_pred == traces.true_class)),
        'hit_fraction': float(hits.mean()),
        'miss_fraction': float(1.0 - hits.mean()),
        'hit_counts': {layer: entry['requests'] for layer, entry in per_layer.items()},
        'false_positive_hits': int(np.sum(hits & ~agree)),
        'disagreements': int(np.sum(~agree)),
        'speedup': total_latency_ms / avg,
        'per_layer': per_layer,
    }


def latency_cdf(traces: Traces) -> List[Tuple[float, float]]:
    """(latency, share of requests at or below it) for each distinct latency"""
    latency = np.sort(traces.latency_ms)
    values = np.unique(latency)
    fractions = np.searchsorted(latency, values, side='right') / latency.size
    return [(float(v), float(f)) for v, f in zip(values, fractions)]


def hit_timeline(traces: Traces, interval_min: float) -> List[Dict]:
    """Per-interval request and hit counts of a run without retraining"""
    if interval_min <= 0:
        raise ValueError(f"interval_min must be positive, got {interval_min}")
    interval_of = np.floor(traces.timestamp_s / (interval_min * 60.0)).astype(np.int64)
    timeline = []
    for k in range(int(interval_of.max()) + 1 if len(traces) else 0):
        at = interval_of == k
        requests = int(at.sum())
        hits = int(np.sum(traces.hit_layer[at] != MISS))
        timeline.append({'interval': k, 'start_min': k * interval_min, 'requests': requests, 'hits': hits,
                         'hit_rate': hits / requests if requests else 0.0, 'retrained': False})
    return timeline


@dataclass
class AdaptationResult:
    traces: Traces
    timeline: List[Dict]
    events: List[Dict] = field(default_factory=list)

    @property
    def mean_hit_rate(self) -> float:
        return float(np.mean(self.traces.hit_layer != MISS))


def _retrain_set(stream: RequestStream, sampled: np.ndarray, sample_interval: np.ndarray, k: int,
                 cfg: AdaptationConfig, validation: Split, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Resample window requests (recency-weighted) mixed with original validation inputs"""
    window_intervals = max(1, math.ceil(cfg.window_min / cfg.retrain_interval_min))
    in_window = sampled[(sample_interval[sampled] <= k) & (sample_interval[sampled] > k - window_intervals)]
    if in_window.size == 0:
        return None

    ages = k - sample_interval[in_window]
    weights = cfg.recency_decay ** ages.astype(np.float64)
    n_val = len(validation)
    mix = cfg.mix_fraction if n_val else 0.0

    if mix >= 1.0:
        return validation.inputs.copy()
    pool = stream.inputs[in_window]
    probs = (1.0 - mix) * weights / weights.sum()
    size = in_window.size
    if mix > 0.0:
        pool = np.vstack([pool, validation.inputs])
        probs = np.concatenate([probs, np.full(n_val, mix / n_val)])
        size += int(round(in_window.size * mix / (1.0 - mix)))
    return pool[rng.choice(pool.shape[0], size=size, p=probs / probs.sum())]


def _retrain(live: Dict[Tuple[int, int], CacheVariant], inputs: np.ndarray, base: BaseModel,
             cfg: AdaptationConfig, cache_cfg: CacheTrainingConfig, seed: int):
    taps, probs = forward_with_taps(base, inputs)
    train_cfg = cfg.train_config(seed)
    retrain_cfg = replace(cache_cfg, predictor=train_cfg, selector=train_cfg)
    updated, retrained, failed = dict(live), [], []
    for key, variant in live.items():
        candidate = variant.copy()
        candidate.predictor.velocity = None
        candidate.selector.velocity = None
        try:
            fit_variant(candidate, taps[key[0] - 1], probs, retrain_cfg)
        except DivergenceError as e:
            logger.warning("retrain of L%d_V%d diverged (%s); keeping the previous variant", key[0], key[1], e)
            failed.append(f"L{key[0]}_V{key[1]}")
            continue
        updated[key] = candidate
        retrained.append(f"L{key[0]}_V{key[1]}")
    return updated, retrained, failed


def run_adaptation(base: BaseModel, plan: SelectionPlan, variants: Dict[Tuple[int, int], CacheVariant],
                   metrics, stream: RequestStream, profile: LayerProfile, cfg: AdaptationConfig,
                   validation: Split, cache_cfg: Optional[CacheTrainingConfig] = None,
                   adapt: bool = True, seed: int = 0,
                   composer_cfg: Optional[ComposerConfig] = None) -> AdaptationResult:
    """
    Model-driven serving with periodic cache retraining

    Each request is sampled with probability sample_rate. At the end of every
    retrain interval the chosen variants are retrained on window samples
    (weight decay^age in intervals) mixed with the original validation data,
    and swapped in after swap_delay_min; requests before the swap keep the
    previous variants. Thresholds are not re-tuned. With adapt=False the
    caches stay frozen.

    Returns:
        AdaptationResult with traces, per-interval hit-rate timeline and retrain events
    """
    _require_feasible(plan, metrics, profile, composer_cfg)
    if stream.inputs is None:
        raise ValueError("Adaptation needs request inputs")
    n = len(stream)
    if n == 0:
        raise WorkloadError("Empty request stream")
    cache_cfg = cache_cfg or CacheTrainingConfig()

    live = {key: variants[key] for key in plan.chosen}
    taps, probs = forward_with_taps(base, stream.inputs)
    base_pred = np.argmax(probs, axis=1)

    interval_s = cfg.retrain_interval_min * 60.0
    interval_of = np.floor(stream.timestamps_s / interval_s).astype(np.int64)
    sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    train_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    sampled = np.flatnonzero(sample_rng.random(n) < cfg.sample_rate)

    served = base_pred.copy()
    hit_layer = np.full(n, MISS, dtype=np.int64)
    latency = np.full(n, profile.total)
    pending: List[Tuple[float, Dict]] = []
    timeline, events = [], []

    for k in range(int(interval_of.max()) + 1):
        idx = np.flatnonzero(interval_of == k)
        pos = 0
        while pos < idx.size:
            if pending and pending[0][0] <= stream.timestamps_s[idx[pos]]:
                live = pending.pop(0)[1]
                continue
            end = idx.size
            if pending:
                end = pos + int(np.searchsorted(stream.timestamps_s[idx[pos:]], pending[0][0], side='left'))
            chunk = idx[pos:end]
            chunk_taps = [t[chunk] for t in taps]
            s, h, l = _serve_model(chunk_taps, base_pred[chunk], plan, live, metrics, profile)
            served[chunk], hit_layer[chunk], latency[chunk] = s, h, l
            pos = end

        hits = int(np.sum(hit_layer[idx] != MISS))
        entry = {'interval': k, 'start_min': k * cfg.retrain_interval_min, 'requests': int(idx.size),
                 'hits': hits, 'hit_rate': hits / idx.size if idx.size else 0.0, 'retrained': False}
        timeline.append(entry)

        if not adapt or not plan.chosen or cfg.sample_rate == 0.0:
            continue
        inputs = _retrain_set(stream, sampled, interval_of, k, cfg, validation, train_rng)
        if inputs is None:
            continue
        latest = pending[-1][1] if pending else live
        updated, retrained, failed = _retrain(latest, inputs, base, cfg, cache_cfg, seed + k + 1)
        swap_at = (k + 1) * interval_s + cfg.swap_delay_min * 60.0
        pending.append((swap_at, updated))
        entry['retrained'] = bool(retrained)
        events.append({'interval': k, 'swap_at_min': swap_at / 60.0, 'samples': int(inputs.shape[0]),
                       'retrained': retrained, 'failed': failed})
        logger.debug("interval %d: retrained %s on %d samples", k, retrained, inputs.shape[0])

    traces = Traces(stream.request_ids, stream.timestamps_s.copy(), stream.classes.copy(),
                    base_pred, served, hit_layer, latency)
    return AdaptationResult(traces, timeline, events)


def sensitivity_sweep(base: BaseModel, plan: SelectionPlan, variants, metrics, stream: RequestStream,
                      profile: LayerProfile, cfg: AdaptationConfig, validation: Split,
                      parameter: str, values: Sequence[float],
                      cache_cfg: Optional[CacheTrainingConfig] = None, seed: int = 0) -> List[Dict]:
    """Mean adaptive hit rate for each value of sample_rate or retrain_interval_min"""
    if parameter not in ('sample_rate', 'retrain_interval_min'):
        raise ValueError(f"Cannot sweep '{parameter}'")
    rows = []
    for value in values:
        result = run_adaptation(base, plan, variants, metrics, stream, profile,
                                replace(cfg, **{parameter: value}), validation, cache_cfg, True, seed)
        rows.append({'parameter': parameter, 'value': value, 'mean_hit_rate': result.mean_hit_rate,
                     'retrains': len(result.events)})
    return rows


def write_traces(path, traces: Traces, config_hash: str = ''):
    write_csv(path, TRACE_COLUMNS,
              ((r.request_id, r.timestamp_s, r.true_class, r.base_pred, r.served_pred, r.hit_layer, r.latency_ms)
               for r in traces.rows()), config_hash)


def write_timeline(path, timelines: Dict[str, Sequence[Dict]], config_hash: str = ''):
    """One CSV for several runs, keyed by a mode label (e.g. static / adaptive)"""
    rows = ((mode,) + tuple(entry[c] for c in TIMELINE_COLUMNS)
            for mode, timeline in timelines.items() for entry in timeline)
    write_csv(path, ('mode',) + TIMELINE_COLUMNS, rows, config_hash)
