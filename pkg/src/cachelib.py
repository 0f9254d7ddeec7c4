"""
Learned Caches - Predictor/selector variants at base-model taps
Builds, trains and measures cache variants, performs lookups, and keeps the
brute-force k-NN store used as a memory/fidelity contrast
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from baselib import BaseModel, Split, forward_with_taps
from nnlib import (Network, TrainConfig, average_pool, build_network, conv1d, dense,
                   distill_loss, fit, forward, load_network, mac_count, parameter_count,
                   relu, save_network, sigmoid, softmax, weighted_selector_loss)
from reportlib import read_json, stamp, write_json

logger = logging.getLogger(__name__)

FC, POOL, CONV = "FC", "Pool", "Conv"
SELECTOR_HIDDEN = 16
INITIAL_THRESHOLD = 0.5
THRESHOLD_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

DEFAULT_MENU = ("FC(1024)", "FC(512)", "Pool(8192)", "Pool(4096)", "Conv(3,1)", "Conv(5,2)")
DEFAULT_W_FP = 4.0
DEFAULT_W_FN = 1.0
DEFAULT_TARGET_ACCURACY = 0.97

# Analytic cost model
DEFAULT_MS_PER_MAC = 2.0e-7
DEFAULT_BYTES_PER_PARAM = 4
DEFAULT_OVERHEAD_MS = 0.05

METRICS_FORMAT = "latebind-metrics"


class IncompatibleArchError(ValueError):
    """Architecture cannot be built on the given tap dimension"""


class EmptyDataError(ValueError):
    """No samples to train or measure on"""


@dataclass(frozen=True)
class ArchSpec:
    family: str
    size: int = 0
    kernel: int = 0
    stride: int = 0

    def __post_init__(self):
        if self.family in (FC, POOL):
            if self.size < 1:
                raise IncompatibleArchError(f"{self.family} size must be positive, got {self.size}")
        elif self.family == CONV:
            if self.kernel < 1 or self.stride < 1:
                raise IncompatibleArchError(f"Conv kernel/stride must be positive, got ({self.kernel},{self.stride})")
        else:
            raise IncompatibleArchError(f"Unknown family '{self.family}'")

    @property
    def label(self) -> str:
        if self.family == CONV:
            return f"Conv({self.kernel},{self.stride})"
        return f"{self.family}({self.size})"

    def __str__(self):
        return self.label


_ARCH_PATTERN = re.compile(r'^\s*(FC|Pool|Conv)\s*\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*$')


def parse_arch(text: str) -> ArchSpec:
    """Parse 'FC(1024)', 'Pool(8192)' or 'Conv(3,1)'"""
    match = _ARCH_PATTERN.match(text)
    if not match:
        raise IncompatibleArchError(f"Cannot parse architecture '{text}'")
    family, first, second = match.groups()
    if family == CONV:
        if second is None:
            raise IncompatibleArchError(f"Conv needs (kernel,stride): '{text}'")
        return ArchSpec(CONV, kernel=int(first), stride=int(second))
    if second is not None:
        raise IncompatibleArchError(f"{family} takes one size: '{text}'")
    return ArchSpec(family, size=int(first))


def pool_width(size: int, tap_dim: int) -> int:
    """Largest divisor of tap_dim not above size (size >= tap_dim gives tap_dim)"""
    width = min(size, tap_dim)
    while tap_dim % width:
        width -= 1
    return width


@dataclass(frozen=True)
class CostModel:
    ms_per_mac: float = DEFAULT_MS_PER_MAC
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM
    overhead_ms: float = DEFAULT_OVERHEAD_MS

    def __post_init__(self):
        if not self.ms_per_mac > 0:
            raise ValueError(f"ms_per_mac must be > 0, got {self.ms_per_mac}")
        if self.bytes_per_param < 1 or self.overhead_ms < 0:
            raise ValueError("bytes_per_param must be >= 1 and overhead_ms >= 0")


@dataclass
class CacheVariant:
    layer: int
    variant_id: int
    arch: ArchSpec
    predictor: Network
    selector: Network
    num_classes: int
    threshold: float = INITIAL_THRESHOLD
    seeds: Tuple[int, ...] = field(default=(0, 0, 0, 0), repr=False)

    @property
    def key(self) -> Tuple[int, int]:
        return (self.layer, self.variant_id)

    @property
    def tap_dim(self) -> int:
        return self.predictor.input_dim

    def copy(self) -> 'CacheVariant':
        return CacheVariant(self.layer, self.variant_id, self.arch, self.predictor.copy(),
                            self.selector.copy(), self.num_classes, self.threshold, self.seeds)


def variant_seeds(seed: int, layer: int, variant_id: int) -> Tuple[int, ...]:
    """Independent seeds for one (layer, variant) job: predictor init/shuffle, selector init/shuffle"""
    state = np.random.SeedSequence([seed, layer, variant_id]).generate_state(4)
    return tuple(int(s) for s in state)


def _predictor_layers(arch: ArchSpec, tap_dim: int, num_classes: int):
    if arch.family == FC:
        return [dense(tap_dim, arch.size), relu(arch.size), dense(arch.size, num_classes)]
    if arch.family == POOL:
        width = pool_width(arch.size, tap_dim)
        return [average_pool(tap_dim, tap_dim // width), dense(width, num_classes)]
    if arch.kernel > tap_dim:
        raise IncompatibleArchError(f"{arch.label}: kernel larger than tap dim {tap_dim}")
    conv = conv1d(tap_dim, arch.kernel, arch.stride)
    return [conv, relu(conv.output_dim), dense(conv.output_dim, num_classes)]


def build_variant(arch: ArchSpec, tap_dim: int, num_classes: int, seed: int = 0,
                  layer: int = 1, variant_id: int = 1) -> CacheVariant:
    """
    Create an untrained cache variant

    Args:
        arch: Predictor architecture
        tap_dim: Output dimension of the tapped block
        num_classes: Classes of the base model
        seed: Global seed; combined with (layer, variant_id)
        layer: Tapped block (1-based)
        variant_id: Index of the architecture in the menu (1-based)

    Returns:
        CacheVariant with threshold 0.5
    """
    if tap_dim < 1 or num_classes < 1:
        raise IncompatibleArchError("tap_dim and num_classes must be positive")
    seeds = variant_seeds(seed, layer, variant_id)
    predictor = build_network(_predictor_layers(arch, tap_dim, num_classes), seeds[0])
    selector = build_network([dense(num_classes, SELECTOR_HIDDEN), relu(SELECTOR_HIDDEN),
                              dense(SELECTOR_HIDDEN, 1)], seeds[2])
    return CacheVariant(layer, variant_id, arch, predictor, selector, num_classes, INITIAL_THRESHOLD, seeds)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def train_predictor(variant: CacheVariant, taps, base_probs, cfg: TrainConfig,
                    temperature: float = 2.0, mix: float = 0.5) -> CacheVariant:
    """
    Distill the base model's output at this tap into the predictor (in place)

    Args:
        variant: Variant to train
        taps: Block outputs HO_i, one row per sample
        base_probs: Base model probabilities Y for the same samples
        cfg: Training hyperparameters; the variant's own seed drives shuffling
        temperature: Softening temperature
        mix: Weight of the hard-label (argmax Y) term

    Returns:
        The trained variant
    """
    taps, probs = _as_batch(taps), _as_batch(base_probs)
    if taps.shape[0] == 0:
        raise EmptyDataError("No taps to train the predictor on")
    if taps.shape[0] != probs.shape[0]:
        raise ValueError("taps and base probabilities differ in count")
    hard = np.argmax(probs, axis=1)

    def loss_fn(logits, idx):
        return distill_loss(logits, probs[idx], hard[idx], temperature, mix)

    run_cfg = TrainConfig(cfg.learning_rate, cfg.momentum, cfg.epochs, cfg.batch_size, variant.seeds[1])
    fit(variant.predictor, taps, loss_fn, run_cfg)
    return variant


def predictor_outputs(variant: CacheVariant, taps) -> np.ndarray:
    """Class distribution PR for each tap row"""
    _, logits = forward(variant.predictor, _as_batch(taps))
    return softmax(logits)


def label_selector_data(pred_probs, base_probs) -> np.ndarray:
    """G = 1 where the predictor's argmax agrees with the base model's"""
    pr, y = _as_batch(pred_probs), _as_batch(base_probs)
    if pr.shape[0] == 0:
        raise EmptyDataError("No predictor outputs to label")
    if pr.shape[0] != y.shape[0]:
        raise ValueError(f"{pr.shape[0]} predictor outputs vs {y.shape[0]} base outputs")
    return (np.argmax(pr, axis=1) == np.argmax(y, axis=1)).astype(np.int64)


def train_selector(variant: CacheVariant, pred_probs, labels, cfg: TrainConfig,
                   w_fp: float = DEFAULT_W_FP, w_fn: float = DEFAULT_W_FN) -> CacheVariant:
    """Train the hit/miss selector with the FP-weighted loss (in place)"""
    pr = _as_batch(pred_probs)
    g = np.asarray(labels, dtype=np.float64)
    if pr.shape[0] == 0:
        raise EmptyDataError("No selector training data")

    def loss_fn(out, idx):
        loss, grad = weighted_selector_loss(out[:, 0], g[idx], w_fp, w_fn)
        return loss, grad[:, None]

    run_cfg = TrainConfig(cfg.learning_rate, cfg.momentum, cfg.epochs, cfg.batch_size, variant.seeds[3])
    fit(variant.selector, pr, loss_fn, run_cfg)
    return variant


def selector_logits(variant: CacheVariant, pred_probs) -> np.ndarray:
    _, out = forward(variant.selector, _as_batch(pred_probs))
    return out[:, 0]


def lookup(variant: CacheVariant, taps):
    """
    Cache lookup: predictor, then selector thresholded at the variant's delta

    Args:
        variant: Trained variant
        taps: One block output or a batch of them

    Returns:
        Tuple of (hit, PR); scalar hit and 1-D PR for a single tap
    """
    x = np.asarray(taps, dtype=np.float64)
    pr = predictor_outputs(variant, x)
    hits = sigmoid(selector_logits(variant, pr)) >= variant.threshold
    if x.ndim == 1:
        return bool(hits[0]), pr[0]
    return hits, pr


def confusion_counts(variant: CacheVariant, taps, base_probs) -> Tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with positive = cache hit and correct = agrees with base"""
    hits, pr = lookup(variant, _as_batch(taps))
    agree = label_selector_data(pr, base_probs).astype(bool)
    tp = int(np.sum(hits & agree))
    fp = int(np.sum(hits & ~agree))
    tn = int(np.sum(~hits & ~agree))
    fn = int(np.sum(~hits & agree))
    return tp, fp, tn, fn


def tune_threshold(variant: CacheVariant, taps, base_probs,
                   target: float = DEFAULT_TARGET_ACCURACY,
                   grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """
    Keep the smallest delta on the grid whose hit accuracy reaches the target

    Falls back to the largest grid value when none does. Sets and returns the
    chosen delta.
    """
    taps, probs = _as_batch(taps), _as_batch(base_probs)
    if taps.shape[0] == 0:
        raise EmptyDataError("No measurement taps for threshold tuning")
    pr = predictor_outputs(variant, taps)
    confidence = sigmoid(selector_logits(variant, pr))
    agree = label_selector_data(pr, probs).astype(bool)

    for delta in sorted(grid):
        hits = confidence >= delta
        n_hits = int(hits.sum())
        accuracy = float(agree[hits].mean()) if n_hits else 1.0
        if accuracy >= target:
            variant.threshold = float(delta)
            return variant.threshold

    variant.threshold = float(max(grid))
    logger.debug("L%d_V%d: no delta reaches accuracy %.3f, using %.2f",
                 variant.layer, variant.variant_id, target, variant.threshold)
    return variant.threshold


@dataclass(frozen=True)
class VariantMetrics:
    layer: int
    variant_id: int
    arch: str
    hit_rate: float
    accuracy: float
    lookup_ms: float
    memory_mb: float
    tp: Optional[int] = None
    fp: Optional[int] = None
    tn: Optional[int] = None
    fn: Optional[int] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.layer < 1 or self.variant_id < 1:
            raise ValueError("layer and variant_id are 1-based")
        for name in ('hit_rate', 'accuracy'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.lookup_ms < 0 or self.memory_mb < 0:
            raise ValueError("lookup_ms and memory_mb must be >= 0")

    @property
    def key(self) -> Tuple[int, int]:
        return (self.layer, self.variant_id)

    @property
    def has_counts(self) -> bool:
        return self.tp is not None

    @property
    def total(self) -> Optional[int]:
        if not self.has_counts:
            return None
        return self.tp + self.fp + self.tn + self.fn

    @property
    def unconditional_accuracy(self) -> Optional[float]:
        """Share of all lookups that do not serve a wrong prediction"""
        if not self.has_counts or not self.total:
            return None
        return (self.tp + self.tn + self.fn) / self.total

    @classmethod
    def from_counts(cls, layer: int, variant_id: int, arch: str, tp: int, fp: int, tn: int, fn: int,
                    lookup_ms: float, memory_mb: float, threshold: Optional[float] = None) -> 'VariantMetrics':
        total = tp + fp + tn + fn
        if total == 0:
            raise EmptyDataError("Empty measurement set")
        hits = tp + fp
        return cls(layer, variant_id, arch, hits / total, tp / hits if hits else 1.0,
                   lookup_ms, memory_mb, tp, fp, tn, fn, threshold)

    def is_consistent(self) -> bool:
        """H and A recomputed from the confusion counts match the stored values"""
        if not self.has_counts:
            return True
        again = VariantMetrics.from_counts(self.layer, self.variant_id, self.arch, self.tp, self.fp,
                                           self.tn, self.fn, self.lookup_ms, self.memory_mb)
        return again.hit_rate == self.hit_rate and again.accuracy == self.accuracy

    def to_dict(self) -> dict:
        return asdict(self)


def lookup_cost(variant: CacheVariant, cost: CostModel) -> Tuple[float, float]:
    """(lookup latency ms, memory MB) of a variant under the analytic cost model"""
    macs = mac_count(variant.predictor) + mac_count(variant.selector)
    params = parameter_count(variant.predictor) + parameter_count(variant.selector)
    return cost.ms_per_mac * macs + cost.overhead_ms, cost.bytes_per_param * params / 2 ** 20


def measure_metrics(variant: CacheVariant, taps, base_probs, cost: CostModel) -> VariantMetrics:
    """Measure H, A, T and M on held-out taps (disjoint from training)"""
    taps = _as_batch(taps)
    if taps.shape[0] == 0:
        raise EmptyDataError("Empty measurement set")
    tp, fp, tn, fn = confusion_counts(variant, taps, base_probs)
    lookup_ms, memory_mb = lookup_cost(variant, cost)
    return VariantMetrics.from_counts(variant.layer, variant.variant_id, variant.arch.label,
                                      tp, fp, tn, fn, lookup_ms, memory_mb, variant.threshold)


@dataclass
class CacheTrainingConfig:
    predictor: TrainConfig = field(default_factory=lambda: TrainConfig(0.01, 0.9, 30, 32))
    selector: TrainConfig = field(default_factory=lambda: TrainConfig(0.01, 0.9, 30, 32))
    temperature: float = 2.0
    mix: float = 0.5
    w_fp: float = DEFAULT_W_FP
    w_fn: float = DEFAULT_W_FN
    target_accuracy: float = DEFAULT_TARGET_ACCURACY
    threshold_grid: Tuple[float, ...] = THRESHOLD_GRID


def fit_variant(variant: CacheVariant, taps, base_probs, cfg: CacheTrainingConfig) -> CacheVariant:
    """Train predictor, then selector on the predictor's outputs for the same samples"""
    train_predictor(variant, taps, base_probs, cfg.predictor, cfg.temperature, cfg.mix)
    pr = predictor_outputs(variant, taps)
    train_selector(variant, pr, label_selector_data(pr, base_probs), cfg.selector, cfg.w_fp, cfg.w_fn)
    return variant


def explore(base: BaseModel, train: Split, measure: Split, menu: Sequence[ArchSpec],
            cost: CostModel, cfg: CacheTrainingConfig, seed: int = 0,
            layers: Optional[Sequence[int]] = None, workers: int = 1,
            on_done: Optional[Callable[[int, int], None]] = None) -> List[Tuple[CacheVariant, VariantMetrics]]:
    """
    Train and measure every (layer, architecture) pair

    Args:
        base: Trained base model
        train: Cache-training part of the validation split
        measure: Measurement holdout
        menu: Architectures; variant ids follow menu order starting at 1
        cost: Cost model for T and M
        cfg: Cache training hyperparameters
        seed: Global seed (each job derives its own from (seed, layer, variant))
        layers: Blocks to explore (default all)
        workers: Thread pool size
        on_done: Progress callback (finished, total)

    Returns:
        (variant, metrics) pairs sorted by (layer, variant id)
    """
    if len(train) == 0 or len(measure) == 0:
        raise EmptyDataError("Cache training and measurement splits must be nonempty")

    train_taps, train_probs = forward_with_taps(base, train.inputs)
    measure_taps, measure_probs = forward_with_taps(base, measure.inputs)
    layers = list(layers) if layers else list(range(1, base.num_blocks + 1))
    jobs = [(layer, vid, arch) for layer in layers for vid, arch in enumerate(menu, start=1)]

    def run(job):
        layer, vid, arch = job
        variant = build_variant(arch, base.tap_dims[layer - 1], base.num_classes, seed, layer, vid)
        fit_variant(variant, train_taps[layer - 1], train_probs, cfg)
        tune_threshold(variant, measure_taps[layer - 1], measure_probs, cfg.target_accuracy, cfg.threshold_grid)
        return variant, measure_metrics(variant, measure_taps[layer - 1], measure_probs, cost)

    results = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = [executor.submit(run, job) for job in jobs]
        for done, future in enumerate(as_completed(futures), start=1):
            results.append(future.result())
            if on_done:
                on_done(done, len(jobs))

    results.sort(key=lambda pair: pair[1].key)
    return results


# Published trade-off table: (layer, variant id in the default menu, arch, A, H, T cpu, T gpu, M MB)
_TRADEOFF_ROWS = [
    (3, 1, "FC(1024)", 0.973, 0.388, 6.08, 0.43, 268.0),
    (3, 3, "Pool(8192)", 0.967, 0.341, 1.32, 0.53, 33.0),
    (3, 5, "Conv(3,1)", 0.962, 0.204, 1.66, 0.48, 2.0),
    (6, 1, "FC(1024)", 0.995, 0.629, 2.94, 0.47, 134.0),
    (6, 3, "Pool(8192)", 0.962, 0.544, 0.64, 0.5, 33.0),
    (6, 5, "Conv(3,1)", 0.993, 0.494, 0.68, 0.49, 0.8),
]
_TRADEOFF_EXAMPLE = {(3, 1), (3, 3), (6, 1)}


def tradeoff_fixture(hardware: str = "cpu", subset: str = "full") -> List[VariantMetrics]:
    """
    Fixture metrics for a ResNet-scale deployment (no confusion counts)

    Args:
        hardware: 'cpu' or 'gpu' lookup latency column
        subset: 'full' (six variants) or 'example' (FC(1024)@3, Pool(8192)@3, FC(1024)@6)
    """
    if hardware not in ('cpu', 'gpu'):
        raise ValueError(f"hardware must be 'cpu' or 'gpu', got {hardware!r}")
    if subset not in ('full', 'example'):
        raise ValueError(f"subset must be 'full' or 'example', got {subset!r}")
    rows = []
    for layer, vid, arch, acc, hit, t_cpu, t_gpu, mem in _TRADEOFF_ROWS:
        if subset == 'example' and (layer, vid) not in _TRADEOFF_EXAMPLE:
            continue
        rows.append(VariantMetrics(layer, vid, arch, hit, acc, t_cpu if hardware == 'cpu' else t_gpu, mem))
    return rows


def write_metrics(path, rows: Sequence[VariantMetrics], config_hash: str = '', source: str = 'explore'):
    payload = stamp({'source': source, 'rows': [row.to_dict() for row in rows]}, METRICS_FORMAT, config_hash)
    write_json(path, payload)


def read_metrics(path) -> List[VariantMetrics]:
    payload = read_json(path, METRICS_FORMAT)
    return [VariantMetrics(**row) for row in payload['rows']]


def variant_paths(variants_dir, layer: int, variant_id: int) -> Tuple[Path, Path]:
    stem = Path(variants_dir) / f"L{layer}_V{variant_id}"
    return Path(f"{stem}.predictor.json.gz"), Path(f"{stem}.selector.json.gz")


def save_variant(variant: CacheVariant, variants_dir, config_hash: str = ''):
    predictor_path, selector_path = variant_paths(variants_dir, variant.layer, variant.variant_id)
    predictor_path.parent.mkdir(parents=True, exist_ok=True)
    save_network(variant.predictor, predictor_path, config_hash)
    save_network(variant.selector, selector_path, config_hash)


def load_variant(variants_dir, row: VariantMetrics, num_classes: int, seed: int = 0) -> CacheVariant:
    """Rebuild a trained variant from its checkpoints and its metrics row (arch, delta)"""
    predictor_path, selector_path = variant_paths(variants_dir, row.layer, row.variant_id)
    predictor, selector = load_network(predictor_path), load_network(selector_path)
    return CacheVariant(row.layer, row.variant_id, parse_arch(row.arch), predictor, selector, num_classes,
                        row.threshold if row.threshold is not None else INITIAL_THRESHOLD,
                        variant_seeds(seed, row.layer, row.variant_id))


@dataclass
class KnnStore:
    """Exact k-NN cache: stores every (HO, label) entry"""
    entries: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.entries = _as_batch(self.entries)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.entries.shape[0] != self.labels.shape[0]:
            raise ValueError("entries and labels differ in count")

    def __len__(self):
        return int(self.labels.shape[0])

    def memory_bytes(self, bytes_per_value: int = DEFAULT_BYTES_PER_PARAM) -> int:
        return knn_memory_bytes(len(self), self.entries.shape[1], bytes_per_value)


def knn_memory_bytes(entries: int, dim: int, bytes_per_value: int = DEFAULT_BYTES_PER_PARAM) -> int:
    return entries * dim * bytes_per_value


def knn_cache_lookup(store: KnnStore, query, k: int = 1) -> Tuple[int, float]:
    """
    Majority label of the k nearest stored entries (Euclidean)

    Returns:
        Tuple of (label, distance to the nearest entry); vote ties go to the smaller label
    """
    if len(store) == 0:
        raise EmptyDataError("k-NN store is empty")
    if not 1 <= k <= len(store):
        raise ValueError(f"k must be in 1..{len(store)}, got {k}")
    q = np.asarray(query, dtype=np.float64)
    dist = np.linalg.norm(store.entries - q, axis=1)
    nearest = np.argpartition(dist, k - 1)[:k]
    label = int(np.argmax(np.bincount(store.labels[nearest])))
    return label, float(dist[nearest].min())
