"""
Neural Network Core - Minimal numpy kernel
Forward pass with recorded activations, analytic backward, momentum SGD,
and the two training losses used by learned caches
"""

import copy
import gzip
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from reportlib import ArtifactFormatError, stamp

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latebind-network"
CHECKPOINT_VERSION = 1

# Distillation defaults (tunable through the experiment config)
DEFAULT_TEMPERATURE = 2.0
DEFAULT_MIX = 0.5

FULLY_CONNECTED = "fully-connected"
RELU = "relu"
AVERAGE_POOL = "average-pool"
CONV1D = "conv1d"
SOFTMAX = "softmax"
LAYER_KINDS = (FULLY_CONNECTED, RELU, AVERAGE_POOL, CONV1D, SOFTMAX)


class ShapeError(ValueError):
    """Input or weight dimensions do not chain"""


class NoForwardPassError(RuntimeError):
    """backward() called before forward()"""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss"""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int = 0
    window: int = 1
    kernel: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"Unknown layer kind '{self.kind}'")
        if self.input_dim < 1:
            raise ShapeError(f"{self.kind}: input dim must be positive, got {self.input_dim}")

        if self.kind == FULLY_CONNECTED:
            if self.output_dim < 1:
                raise ShapeError(f"fully-connected: output dim must be positive, got {self.output_dim}")
        elif self.kind == AVERAGE_POOL:
            if self.window < 1 or self.input_dim % self.window:
                raise ShapeError(f"average-pool: window {self.window} must divide input dim {self.input_dim}")
            object.__setattr__(self, 'output_dim', self.input_dim // self.window)
        elif self.kind == CONV1D:
            if self.kernel < 1 or self.stride < 1 or self.kernel > self.input_dim:
                raise ShapeError(
                    f"conv1d: kernel {self.kernel} / stride {self.stride} invalid for input dim {self.input_dim}")
            object.__setattr__(self, 'output_dim', (self.input_dim - self.kernel) // self.stride + 1)
        else:
            object.__setattr__(self, 'output_dim', self.input_dim)

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'input_dim': self.input_dim, 'output_dim': self.output_dim,
                'window': self.window, 'kernel': self.kernel, 'stride': self.stride}


def dense(input_dim: int, output_dim: int) -> LayerSpec:
    return LayerSpec(FULLY_CONNECTED, input_dim, output_dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec(RELU, dim)


def average_pool(input_dim: int, window: int) -> LayerSpec:
    return LayerSpec(AVERAGE_POOL, input_dim, window=window)


def conv1d(input_dim: int, kernel: int, stride: int) -> LayerSpec:
    return LayerSpec(CONV1D, input_dim, kernel=kernel, stride=stride)


def softmax_layer(dim: int) -> LayerSpec:
    return LayerSpec(SOFTMAX, dim)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        # lr = 0 is accepted as a no-op step
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class Network:
    layers: List[LayerSpec]
    weights: List[List[np.ndarray]]
    seed: int = 0
    velocity: Optional[List[List[np.ndarray]]] = field(default=None, repr=False)
    _inputs: Optional[List[np.ndarray]] = field(default=None, repr=False)
    _outputs: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def copy(self) -> 'Network':
        """Independent copy (weights and momentum state), recorded pass dropped"""
        clone = Network(list(self.layers), copy.deepcopy(self.weights), self.seed,
                        copy.deepcopy(self.velocity))
        return clone


def _check_chain(layers: Sequence[LayerSpec]):
    if not layers:
        raise ShapeError("Network needs at least one layer")
    for prev, nxt in zip(layers, layers[1:]):
        if prev.output_dim != nxt.input_dim:
            raise ShapeError(
                f"{prev.kind} outputs {prev.output_dim} but {nxt.kind} expects {nxt.input_dim}")


def _init_layer(spec: LayerSpec, rng: np.random.Generator) -> List[np.ndarray]:
    if spec.kind == FULLY_CONNECTED:
        limit = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
        W = rng.uniform(-limit, limit, size=(spec.output_dim, spec.input_dim))
        return [W, np.zeros(spec.output_dim)]
    if spec.kind == CONV1D:
        limit = np.sqrt(6.0 / (spec.kernel + 1))
        return [rng.uniform(-limit, limit, size=spec.kernel), np.zeros(1)]
    return []


def build_network(layers: Sequence[LayerSpec], seed: int = 0) -> Network:
    """
    Create a network with seeded Glorot-uniform weights and zero biases

    Args:
        layers: Ordered layer specs; dimensions must chain
        seed: RNG seed for weight initialization

    Returns:
        Network ready for forward()
    """
    layers = list(layers)
    _check_chain(layers)
    rng = np.random.default_rng(seed)
    weights = [_init_layer(spec, rng) for spec in layers]
    return Network(layers, weights, seed)


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _conv_windows(a: np.ndarray, spec: LayerSpec) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(a, spec.kernel, axis=1)
    return windows[:, ::spec.stride, :]


def dense_forward(a: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ W.T + b


def _layer_forward(spec: LayerSpec, params: List[np.ndarray], a: np.ndarray) -> np.ndarray:
    if spec.kind == FULLY_CONNECTED:
        return dense_forward(a, params[0], params[1])
    if spec.kind == RELU:
        return np.maximum(a, 0.0)
    if spec.kind == AVERAGE_POOL:
        return a.reshape(a.shape[0], spec.output_dim, spec.window).mean(axis=2)
    if spec.kind == CONV1D:
        return _conv_windows(a, spec) @ params[0] + params[1][0]
    return softmax(a)


def forward(net: Network, x) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Run a forward pass and record it for backward()

    Args:
        net: Network
        x: Single input vector (1-D) or batch with one sample per row (2-D)

    Returns:
        Tuple of (activation after every layer, final output); 1-D input
        gives 1-D activations
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"Expected input dim {net.input_dim}, got shape {x.shape}")

    inputs, outputs = [], []
    a = batch
    for spec, params in zip(net.layers, net.weights):
        inputs.append(a)
        a = _layer_forward(spec, params, a)
        outputs.append(a)

    net._inputs, net._outputs = inputs, outputs
    activations = [o[0] for o in outputs] if single else list(outputs)
    return activations, activations[-1]


def _layer_backward(spec: LayerSpec, params: List[np.ndarray], a: np.ndarray,
                    out: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    if spec.kind == FULLY_CONNECTED:
        W = params[0]
        return g @ W, [g.T @ a, g.sum(axis=0)]
    if spec.kind == RELU:
        return g * (a > 0), []
    if spec.kind == AVERAGE_POOL:
        return np.repeat(g / spec.window, spec.window, axis=1), []
    if spec.kind == CONV1D:
        kernel = params[0]
        windows = _conv_windows(a, spec)
        d_kernel = np.einsum('no,nok->k', g, windows)
        d_bias = np.array([g.sum()])
        da = np.zeros_like(a)
        span = spec.stride * (spec.output_dim - 1) + 1
        for j in range(spec.kernel):
            da[:, j:j + span:spec.stride] += g * kernel[j]
        return da, [d_kernel, d_bias]
    # softmax
    return out * (g - np.sum(g * out, axis=1, keepdims=True)), []


def backward(net: Network, grad_output) -> List[List[np.ndarray]]:
    """
    Backpropagate a loss gradient through the last recorded forward pass

    Args:
        net: Network that has run forward()
        grad_output: dLoss/dOutput, same shape as the recorded output

    Returns:
        Gradients with the same nesting as net.weights
    """
    if net._inputs is None:
        raise NoForwardPassError("backward() needs a recorded forward pass")

    g = np.asarray(grad_output, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != net._outputs[-1].shape:
        raise ShapeError(f"Gradient shape {g.shape} does not match output {net._outputs[-1].shape}")

    grads: List[List[np.ndarray]] = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        g, layer_grads = _layer_backward(net.layers[idx], net.weights[idx],
                                         net._inputs[idx], net._outputs[idx], g)
        grads[idx] = layer_grads
    return grads


def sgd_step(net: Network, grads: List[List[np.ndarray]], cfg: TrainConfig) -> Network:
    """
    Momentum SGD: v <- momentum*v + g ; w <- w - lr*v (updates net in place)

    Returns:
        The same network, for chaining
    """
    if len(grads) != len(net.weights):
        raise ShapeError("Gradient list does not match network layers")
    for params, layer_grads in zip(net.weights, grads):
        if len(params) != len(layer_grads):
            raise ShapeError("Gradient list does not match layer parameters")
        for w, g in zip(params, layer_grads):
            if w.shape != g.shape:
                raise ShapeError(f"Gradient shape {g.shape} != weight shape {w.shape}")
            if not np.all(np.isfinite(g)):
                raise ValueError("Non-finite gradient")

    if net.velocity is None:
        net.velocity = [[np.zeros_like(w) for w in params] for params in net.weights]

    for params, layer_grads, layer_vel in zip(net.weights, grads, net.velocity):
        for w, g, v in zip(params, layer_grads, layer_vel):
            v *= cfg.momentum
            v += g
            w -= cfg.learning_rate * v
    return net


def cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against hard labels, with gradient wrt logits"""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = z.shape[0]
    logp = log_softmax(z)
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad.reshape(np.shape(logits))


def soften(probs, temperature: float) -> np.ndarray:
    """normalize(p ** (1/temperature)) along the class axis"""
    powered = np.power(np.asarray(probs, dtype=np.float64), 1.0 / temperature)
    return powered / np.sum(powered, axis=-1, keepdims=True)


def distill_loss(logits, base_probs, labels,
                 temperature: float = DEFAULT_TEMPERATURE,
                 mix: float = DEFAULT_MIX) -> Tuple[float, np.ndarray]:
    """
    Predictor loss mixing the hard label with the base model's soft output

    loss = mix * CE(softmax(z), label)
           + (1 - mix) * T^2 * KL(soften(p, T) || softmax(z / T))

    Args:
        logits: Predictor logits, one row per sample (or a single vector)
        base_probs: Base model class probabilities, same shape
        labels: Hard class index per sample
        temperature: T > 0
        mix: Weight of the hard-label term in [0, 1]

    Returns:
        Tuple of (mean loss, gradient wrt logits)
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")

    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    p = np.atleast_2d(np.asarray(base_probs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.shape != p.shape:
        raise ShapeError(f"logits {z.shape} and base probabilities {p.shape} differ")
    if y.shape[0] != z.shape[0] or np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("labels out of range")

    n = z.shape[0]
    ce, ce_grad = cross_entropy(z, y)

    q = soften(p, temperature)
    log_r = log_softmax(z / temperature)
    q_log_q = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    kl = float(np.sum(q_log_q - q * log_r) / n)
    kl_grad = temperature * (np.exp(log_r) - q) / n

    loss = mix * ce + (1.0 - mix) * temperature ** 2 * kl
    grad = mix * ce_grad + (1.0 - mix) * kl_grad
    return loss, grad.reshape(np.shape(logits))


def weighted_selector_loss(logits, labels, w_fp: float, w_fn: float) -> Tuple[float, np.ndarray]:
    """
    Binary cross-entropy with separate penalties for the two error directions

    Label 0 (predictor wrong) pushing the logit up is scaled by w_fp;
    label 1 (predictor right) pushing it down is scaled by w_fn.

    Returns:
        Tuple of (mean loss, gradient wrt logits)
    """
    if not (w_fp > 0 and w_fn > 0):
        raise ValueError("w_fp and w_fn must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("Non-finite selector logit")
    g_lab = np.asarray(labels, dtype=np.float64)

    n = max(z.size, 1)
    loss = float(np.sum(w_fn * g_lab * np.logaddexp(0.0, -z)
                        + w_fp * (1.0 - g_lab) * np.logaddexp(0.0, z)) / n)
    s = sigmoid(z)
    grad = (w_fn * g_lab * (s - 1.0) + w_fp * (1.0 - g_lab) * s) / n
    return loss, grad


def fit(net: Network, inputs: np.ndarray,
        loss_fn: Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]],
        cfg: TrainConfig) -> List[float]:
    """
    Minibatch training loop

    Args:
        net: Network to train in place
        inputs: Training inputs, one row per sample
        loss_fn: Called as loss_fn(outputs, batch_indices) -> (loss, grad wrt outputs)
        cfg: Training hyperparameters (the seed drives per-epoch shuffling)

    Returns:
        Mean loss per epoch
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("No training samples")

    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, out = forward(net, inputs[idx])
            loss, grad = loss_fn(out, idx)
            if not np.isfinite(loss):
                raise DivergenceError(f"Non-finite loss at epoch {epoch + 1}")
            sgd_step(net, backward(net, grad), cfg)
            total += loss * len(idx)
        history.append(total / n)
        logger.debug("epoch %d/%d loss=%.6f", epoch + 1, cfg.epochs, history[-1])
    return history


def parameter_count(net: Network) -> int:
    return int(sum(w.size for params in net.weights for w in params))


def mac_count(net: Network) -> int:
    """Multiply-accumulates for one sample; pooling counts one add per input"""
    total = 0
    for spec in net.layers:
        if spec.kind == FULLY_CONNECTED:
            total += spec.input_dim * spec.output_dim
        elif spec.kind == CONV1D:
            total += spec.output_dim * spec.kernel
        elif spec.kind == AVERAGE_POOL:
            total += spec.input_dim
    return total


def network_to_dict(net: Network, config_hash: str = '') -> dict:
    return stamp({
        'version': CHECKPOINT_VERSION,
        'seed': net.seed,
        'layers': [spec.to_dict() for spec in net.layers],
        'weights': [[{'shape': list(w.shape), 'data': w.ravel().tolist()} for w in params]
                    for params in net.weights],
    }, CHECKPOINT_FORMAT, config_hash)


def network_from_dict(payload: dict) -> Network:
    if payload.get('format') != CHECKPOINT_FORMAT:
        raise ArtifactFormatError(f"Not a network checkpoint (format={payload.get('format')!r})")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise ArtifactFormatError(f"Unsupported checkpoint version {payload.get('version')}")

    layers = [LayerSpec(d['kind'], d['input_dim'], d['output_dim'], d['window'], d['kernel'], d['stride'])
              for d in payload['layers']]
    net = build_network(layers, payload['seed'])
    if len(payload['weights']) != len(net.weights):
        raise ValueError(f"Checkpoint holds weights for {len(payload['weights'])} layers, "
                         f"expected {len(net.weights)}")
    for idx, (expected, stored) in enumerate(zip(net.weights, payload['weights'])):
        if len(expected) != len(stored):
            raise ShapeError(f"Layer {idx}: expected {len(expected)} weight tensors")
        for k, entry in enumerate(stored):
            w = np.asarray(entry['data'], dtype=np.float64).reshape(entry['shape'])
            if w.shape != expected[k].shape:
                raise ShapeError(f"Layer {idx}: weight shape {w.shape} != {expected[k].shape}")
            expected[k] = w
    return net


def save_network(net: Network, path: str, config_hash: str = ''):
    """Write a gzip-compressed JSON checkpoint (LayerSpecs, then row-major float64 weights)"""
    # mtime=0 and no stored name keep the bytes reproducible
    with open(path, 'wb') as raw, gzip.GzipFile(filename='', mode='wb', fileobj=raw, mtime=0) as gz:
        gz.write(json.dumps(network_to_dict(net, config_hash), separators=(',', ':')).encode('utf-8'))


def load_network(path: str) -> Network:
    with gzip.open(path, 'rt', encoding='utf-8') as f:
        return network_from_dict(json.load(f))
