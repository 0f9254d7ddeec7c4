"""
Base Model - Synthetic task and multi-block base network
Gaussian class clusters, an N-block dense/relu network with taps after each
block, and the per-block latency profile used by the composer and simulator
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from nnlib import (Network, TrainConfig, build_network, cross_entropy, dense, dense_forward,
                   fit, forward, relu, softmax)
from reportlib import csv_header_line, parse_header_line, require

logger = logging.getLogger(__name__)

DEFAULT_NUM_CLASSES = 10
DEFAULT_INPUT_DIM = 32
DEFAULT_SAMPLES_PER_CLASS = 100
DEFAULT_SEPARATION = 3.0
DEFAULT_NOISE_STD = 1.0
DEFAULT_SPLIT = (0.6, 0.2, 0.2)

DEFAULT_NUM_BLOCKS = 8
DEFAULT_BLOCK_WIDTH = 64
DEFAULT_LAYER_LATENCY_MS = 4.0

# Share of the validation split used to train caches; the rest measures them
DEFAULT_CACHE_TRAIN_FRACTION = 0.8

SPLIT_NAMES = ("train", "validation", "test")


class DatasetError(ValueError):
    """Degenerate dataset spec or malformed dataset file"""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = DEFAULT_NUM_CLASSES
    input_dim: int = DEFAULT_INPUT_DIM
    samples_per_class: int = DEFAULT_SAMPLES_PER_CLASS
    separation: float = DEFAULT_SEPARATION
    noise_std: float = DEFAULT_NOISE_STD
    seed: int = 0
    split: Tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_dim < 1 or self.samples_per_class < 1:
            raise DatasetError("input_dim and samples_per_class must be positive")
        if not self.separation > 0:
            raise DatasetError(f"separation must be > 0, got {self.separation}")
        if self.noise_std < 0:
            raise DatasetError(f"noise_std must be >= 0, got {self.noise_std}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise DatasetError(f"split must be three non-negative fractions summing to 1, got {self.split}")


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass
class Dataset:
    train: Split
    validation: Split
    test: Split
    num_classes: int

    @property
    def input_dim(self) -> int:
        return int(self.train.inputs.shape[1])

    def splits(self):
        return zip(SPLIT_NAMES, (self.train, self.validation, self.test))


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """
    Draw Gaussian class clusters and split them per class

    Centers are random directions scaled to the separation; every class is
    split with the same fractions so all three splits stay balanced.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.num_classes, spec.input_dim))
    centers *= spec.separation / np.linalg.norm(centers, axis=1, keepdims=True)

    # validation and test take floor shares, train keeps the remainder
    n_val = int(np.floor(spec.samples_per_class * spec.split[1] + 1e-9))
    n_test = int(np.floor(spec.samples_per_class * spec.split[2] + 1e-9))
    n_train = spec.samples_per_class - n_val - n_test
    parts = {name: ([], []) for name in SPLIT_NAMES}

    for label in range(spec.num_classes):
        noise = rng.standard_normal((spec.samples_per_class, spec.input_dim))
        samples = centers[label] + spec.noise_std * noise
        bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, spec.samples_per_class)]
        for name, (lo, hi) in zip(SPLIT_NAMES, bounds):
            parts[name][0].append(samples[lo:hi])
            parts[name][1].append(np.full(hi - lo, label, dtype=np.int64))

    splits = []
    for name in SPLIT_NAMES:
        inputs = np.concatenate(parts[name][0]) if parts[name][0] else np.zeros((0, spec.input_dim))
        labels = np.concatenate(parts[name][1])
        order = rng.permutation(len(labels))
        splits.append(Split(inputs[order], labels[order]))

    return Dataset(*splits, num_classes=spec.num_classes)


def cache_split(split: Split, fraction: float = DEFAULT_CACHE_TRAIN_FRACTION,
                seed: int = 0) -> Tuple[Split, Split]:
    """Split the validation set into (cache-training, measurement) parts"""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(split))
    cut = int(round(len(split) * fraction))
    first, second = order[:cut], order[cut:]
    return (Split(split.inputs[first], split.labels[first]),
            Split(split.inputs[second], split.labels[second]))


def save_dataset(dataset: Dataset, path, config_hash: str = ''):
    """CSV: stamped header, then split,label,x0..x{D-1} per sample"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ['split', 'label'] + [f'x{k}' for k in range(dataset.input_dim)]
    with open(path, 'w', encoding='utf-8') as f:
        f.write(csv_header_line(config_hash) + f" classes={dataset.num_classes}\n")
        f.write(','.join(columns) + '\n')
        for name, split in dataset.splits():
            for x, label in zip(split.inputs, split.labels):
                f.write(f"{name},{int(label)}," + ','.join(repr(float(v)) for v in x) + '\n')


def load_dataset(path) -> Dataset:
    with open(require(path), 'r', encoding='utf-8') as f:
        meta = parse_header_line(f.readline())
        columns = f.readline().strip().split(',')
        if columns[:2] != ['split', 'label']:
            raise DatasetError(f"{path}: unexpected columns {columns[:2]}")
        rows = {name: ([], []) for name in SPLIT_NAMES}
        for line_no, line in enumerate(f, start=3):
            cells = line.strip().split(',')
            if len(cells) != len(columns) or cells[0] not in rows:
                raise DatasetError(f"{path}:{line_no}: malformed row")
            rows[cells[0]][0].append([float(v) for v in cells[2:]])
            rows[cells[0]][1].append(int(cells[1]))

    dim = len(columns) - 2
    splits = [Split(np.asarray(rows[n][0], dtype=np.float64).reshape(-1, dim),
                    np.asarray(rows[n][1], dtype=np.int64)) for n in SPLIT_NAMES]
    num_classes = int(meta.get('classes', 0)) or int(max(s.labels.max(initial=-1) for s in splits)) + 1
    return Dataset(*splits, num_classes=num_classes)


@dataclass
class BaseModel:
    network: Network
    num_blocks: int
    tap_dims: List[int]
    num_classes: int
    test_accuracy: Optional[float] = None
    loss_history: List[float] = field(default_factory=list)

    @property
    def head(self) -> List[np.ndarray]:
        return self.network.weights[-1]


@dataclass(frozen=True)
class LayerProfile:
    """Synthetic per-block compute latency in ms (blocks numbered from 1)"""
    latencies: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'latencies', tuple(float(v) for v in self.latencies))
        if not self.latencies:
            raise ValueError("LayerProfile needs at least one block")
        if any(not v > 0 for v in self.latencies):
            raise ValueError(f"All layer latencies must be > 0, got {self.latencies}")

    @classmethod
    def uniform(cls, num_blocks: int = DEFAULT_NUM_BLOCKS,
                latency_ms: float = DEFAULT_LAYER_LATENCY_MS) -> 'LayerProfile':
        return cls(tuple([latency_ms] * num_blocks))

    @property
    def num_layers(self) -> int:
        return len(self.latencies)

    @property
    def total(self) -> float:
        return sum(self.latencies)

    def prefix(self, i: int) -> float:
        """Compute time of blocks 1..i"""
        if not 0 <= i <= self.num_layers:
            raise ValueError(f"layer {i} outside 0..{self.num_layers}")
        return sum(self.latencies[:i])

    def span(self, i: int, j: int) -> float:
        """Compute time of blocks i+1..j"""
        return sum(self.latencies[i:j])

    def to_dict(self) -> dict:
        return {'latencies_ms': list(self.latencies)}

    @classmethod
    def from_dict(cls, payload: dict) -> 'LayerProfile':
        return cls(tuple(payload['latencies_ms']))


def build_base_network(input_dim: int, num_classes: int, widths: Sequence[int], seed: int = 0) -> Network:
    """N blocks of dense+relu followed by a dense head producing logits"""
    if len(widths) < 2:
        raise ValueError(f"Base model needs at least 2 blocks, got {len(widths)}")
    layers = []
    prev = input_dim
    for width in widths:
        layers += [dense(prev, width), relu(width)]
        prev = width
    layers.append(dense(prev, num_classes))
    return build_network(layers, seed)


def block_widths(num_blocks: int = DEFAULT_NUM_BLOCKS, width: int = DEFAULT_BLOCK_WIDTH,
                 widths: Optional[Sequence[int]] = None) -> List[int]:
    """Explicit (possibly tapering) widths when given, else a constant width"""
    if widths:
        if len(widths) != num_blocks:
            raise ValueError(f"{len(widths)} block widths given for {num_blocks} blocks")
        return [int(w) for w in widths]
    return [width] * num_blocks


def train_base(dataset: Dataset, cfg: TrainConfig, widths: Sequence[int]) -> BaseModel:
    """
    Train the base network on the train split with cross-entropy

    Args:
        dataset: Generated dataset
        cfg: Training hyperparameters (seed also drives initialization)
        widths: Width of every block, one entry per block

    Returns:
        BaseModel with test accuracy and loss history recorded
    """
    if len(dataset.train) == 0:
        raise DatasetError("Training split is empty")

    net = build_base_network(dataset.input_dim, dataset.num_classes, widths, cfg.seed)
    labels = dataset.train.labels

    def loss_fn(logits, idx):
        return cross_entropy(logits, labels[idx])

    history = fit(net, dataset.train.inputs, loss_fn, cfg)
    model = BaseModel(net, len(widths), list(widths), dataset.num_classes, loss_history=history)

    if len(dataset.test):
        _, probs = forward_with_taps(model, dataset.test.inputs)
        model.test_accuracy = float(np.mean(np.argmax(probs, axis=1) == dataset.test.labels))
        logger.info("base model: %d blocks, test accuracy %.4f", model.num_blocks, model.test_accuracy)
    return model


def forward_with_taps(model: BaseModel, x) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Run the base model and return the output of every block plus softmax probabilities

    Args:
        model: BaseModel
        x: One input vector or a batch (rows = samples)

    Returns:
        Tuple of (taps HO_1..HO_N, probabilities Y)
    """
    activations, logits = forward(model.network, x)
    taps = [activations[2 * i + 1] for i in range(model.num_blocks)]
    return taps, softmax(logits)


def head_probabilities(model: BaseModel, last_tap) -> np.ndarray:
    """Apply the output head to the last block's output"""
    W, b = model.head
    tap = np.asarray(last_tap, dtype=np.float64)
    single = tap.ndim == 1
    probs = softmax(dense_forward(tap[None, :] if single else tap, W, b))
    return probs[0] if single else probs


def base_model_from_network(net: Network, test_accuracy: Optional[float] = None) -> BaseModel:
    """Recover block structure from a loaded checkpoint"""
    num_blocks = (len(net.layers) - 1) // 2
    tap_dims = [net.layers[2 * i].output_dim for i in range(num_blocks)]
    return BaseModel(net, num_blocks, tap_dims, net.output_dim, test_accuracy)
