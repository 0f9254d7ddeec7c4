"""
Experiment Configuration - One versioned JSON file per experiment
Schema-checked sections (unknown keys rejected, dotted error paths),
environment defaults from .env, and the config hash stamped on every output
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import List, Optional, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

from baselib import (DEFAULT_BLOCK_WIDTH, DEFAULT_CACHE_TRAIN_FRACTION, DEFAULT_INPUT_DIM,
                     DEFAULT_LAYER_LATENCY_MS, DEFAULT_NOISE_STD, DEFAULT_NUM_BLOCKS, DEFAULT_NUM_CLASSES,
                     DEFAULT_SAMPLES_PER_CLASS, DEFAULT_SEPARATION, DatasetSpec, LayerProfile,
                     block_widths)
from cachelib import (DEFAULT_MENU, DEFAULT_MS_PER_MAC, DEFAULT_OVERHEAD_MS, DEFAULT_TARGET_ACCURACY,
                      DEFAULT_W_FN, DEFAULT_W_FP, THRESHOLD_GRID, ArchSpec, CacheTrainingConfig, CostModel,
                      parse_arch)
from composelib import ALPHA_GRID, DEFAULT_ACCURACY_THRESHOLD, DEFAULT_ALPHA, DEFAULT_MEMORY_BUDGET_MB, ComposerConfig
from nnlib import TrainConfig
from planlib import DEFAULT_HIT_LATENCY_MS, DEFAULT_HIT_PROBABILITY, DEFAULT_QUERIES, DEFAULT_SLOS, POLICIES
from simlib import MODEL_DRIVEN, PROFILE_DRIVEN, AdaptationConfig, WorkloadSpec

load_dotenv()

CONFIG_VERSION = 1
DEFAULT_CONFIG_PATH = "configs/experiment.json"
DEFAULT_OUT_DIR = "runs/default"


class ConfigError(ValueError):
    """Experiment config fails schema or range validation"""


@dataclass(frozen=True)
class DatasetSection:
    num_classes: int = DEFAULT_NUM_CLASSES
    input_dim: int = DEFAULT_INPUT_DIM
    samples_per_class: int = DEFAULT_SAMPLES_PER_CLASS
    separation: float = DEFAULT_SEPARATION
    noise_std: float = DEFAULT_NOISE_STD
    split: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32


@dataclass(frozen=True)
class BaseSection:
    num_blocks: int = DEFAULT_NUM_BLOCKS
    block_width: int = DEFAULT_BLOCK_WIDTH
    block_widths: Optional[List[int]] = None
    layer_latency_ms: Union[float, List[float]] = DEFAULT_LAYER_LATENCY_MS
    training: TrainingSection = field(default_factory=lambda: TrainingSection(0.01, 0.9, 40, 32))


@dataclass(frozen=True)
class CacheTrainingSection:
    predictor: TrainingSection = field(default_factory=TrainingSection)
    selector: TrainingSection = field(default_factory=TrainingSection)
    temperature: float = 2.0
    mix: float = 0.5
    w_fp: float = DEFAULT_W_FP
    w_fn: float = DEFAULT_W_FN
    target_accuracy: float = DEFAULT_TARGET_ACCURACY
    threshold_grid: List[float] = field(default_factory=lambda: list(THRESHOLD_GRID))
    train_fraction: float = DEFAULT_CACHE_TRAIN_FRACTION
    layers: Optional[List[int]] = None


@dataclass(frozen=True)
class CostModelSection:
    ms_per_mac: float = DEFAULT_MS_PER_MAC
    bytes_per_param: int = 4
    overhead_ms: float = DEFAULT_OVERHEAD_MS


@dataclass(frozen=True)
class ComposerSection:
    accuracy_threshold: float = DEFAULT_ACCURACY_THRESHOLD
    memory_budget_mb: float = DEFAULT_MEMORY_BUDGET_MB
    alpha: Union[float, str] = DEFAULT_ALPHA
    max_concurrent_lookups: int = 1
    alpha_grid: List[float] = field(default_factory=lambda: list(ALPHA_GRID))
    accuracy_targets: List[float] = field(default_factory=lambda: [0.95, 0.96, 0.97, 0.98, 0.99])


@dataclass(frozen=True)
class WorkloadSection:
    zipf_skew: float = 1.5
    rotation_period_min: float = 15.0
    request_rate_per_s: float = 2.0
    duration_min: float = 120.0
    mode: str = MODEL_DRIVEN


@dataclass(frozen=True)
class AdaptationSection:
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


@dataclass(frozen=True)
class PlannerSection:
    dag: str = "traffic_dag.json"
    policy: str = "equal"
    slos: List[float] = field(default_factory=lambda: [float(s) for s in DEFAULT_SLOS])
    queries: int = DEFAULT_QUERIES
    cached_node: str = "objdet"
    hit_probability: float = DEFAULT_HIT_PROBABILITY
    hit_latency_ms: float = DEFAULT_HIT_LATENCY_MS
    audit_queries: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    base_training: BaseSection = field(default_factory=BaseSection)
    cache_training: CacheTrainingSection = field(default_factory=CacheTrainingSection)
    variants: List[str] = field(default_factory=lambda: list(DEFAULT_MENU))
    cost_model: CostModelSection = field(default_factory=CostModelSection)
    composer: ComposerSection = field(default_factory=ComposerSection)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    seed: int = 0
    workers: int = 1
    source_dir: str = field(default=".", compare=False)


def _type_name(hint) -> str:
    return getattr(hint, '__name__', str(hint).replace('typing.', ''))


def _coerce(value, hint, path: str):
    origin = get_origin(hint)
    if is_dataclass(hint):
        return _build(hint, value, path)
    if origin is Union:
        args = get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: must not be null")
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: expected {' or '.join(_type_name(a) for a in args if a is not type(None))}, "
                          f"got {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (item,) = get_args(hint)
        return [_coerce(v, item, f"{path}[{k}]") for k, v in enumerate(value)]
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{path}: expected {_type_name(hint)}, got {value!r}")


def _build(cls, data, path: str):
    """Every field of a present section is required; unknown keys are rejected"""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {data!r}")
    hints = get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    values = {}
    for name in names:
        if name not in data:
            raise ConfigError(f"{path}.{name}: missing field")
        values[name] = _coerce(data[name], hints[name], f"{path}.{name}")
    return cls(**values)


def config_from_dict(data: dict, source_dir: str = ".") -> ExperimentConfig:
    """
    Parse and validate a config payload

    Missing top-level sections take their defaults; present sections must be
    complete. Range errors from the library types are reported per section.
    """
    if not isinstance(data, dict):
        raise ConfigError("config: expected an object")
    if data.get('version') != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {data.get('version')!r}")
    hints = get_type_hints(ExperimentConfig)
    names = [f.name for f in fields(ExperimentConfig) if f.name != 'source_dir']
    values = {}
    for key, value in data.items():
        if key == 'version':
            continue
        if key not in names:
            raise ConfigError(f"{key}: unknown key")
        if value is None:
            raise ConfigError(f"{key}: section must not be null")
        values[key] = _coerce(value, hints[key], key)
    cfg = ExperimentConfig(**values, source_dir=source_dir)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    """Build every library object once so range errors surface at load time"""
    checks = [
        ('dataset', lambda: dataset_spec(cfg)),
        ('base_training', lambda: (base_train_config(cfg), base_widths(cfg), layer_profile(cfg))),
        ('cache_training', lambda: cache_training_config(cfg)),
        ('variants', lambda: variant_menu(cfg)),
        ('cost_model', lambda: cost_model(cfg)),
        ('composer', lambda: composer_config(cfg)),
        ('workload', lambda: workload_spec(cfg)),
        ('adaptation', lambda: adaptation_config(cfg)),
    ]
    for section, check in checks:
        try:
            check()
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{section}: {e}") from e
    if not 0.0 < cfg.cache_training.train_fraction < 1.0:
        raise ConfigError("cache_training.train_fraction: must be in (0, 1)")
    if cfg.cache_training.layers and any(not 1 <= l <= cfg.base_training.num_blocks
                                         for l in cfg.cache_training.layers):
        raise ConfigError("cache_training.layers: layer outside 1..num_blocks")
    if cfg.workload.mode not in (MODEL_DRIVEN, PROFILE_DRIVEN):
        raise ConfigError(f"workload.mode: expected '{MODEL_DRIVEN}' or '{PROFILE_DRIVEN}'")
    if cfg.planner.policy not in POLICIES:
        raise ConfigError(f"planner.policy: expected one of {POLICIES}")
    if cfg.planner.queries < 1 or not cfg.planner.slos:
        raise ConfigError("planner: queries must be positive and slos nonempty")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return config_from_dict(data, str(path.parent))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    payload = {'version': CONFIG_VERSION}
    payload.update({k: v for k, v in asdict(cfg).items() if k != 'source_dir'})
    return payload


def write_config(cfg: ExperimentConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write('\n')


def config_hash(cfg: ExperimentConfig) -> str:
    """First 12 hex chars of SHA-256 over the canonical resolved config"""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    if seed is None:
        return cfg
    return replace(cfg, seed=seed)


def default_paths(config_arg: Optional[str] = None, out_arg: Optional[str] = None):
    """CLI flags win over LATEBIND_CONFIG / LATEBIND_OUT_DIR, which win over built-in defaults"""
    config_path = config_arg or os.getenv('LATEBIND_CONFIG') or DEFAULT_CONFIG_PATH
    out_dir = out_arg or os.getenv('LATEBIND_OUT_DIR') or DEFAULT_OUT_DIR
    return Path(config_path), Path(out_dir)


def dataset_spec(cfg: ExperimentConfig) -> DatasetSpec:
    d = cfg.dataset
    return DatasetSpec(d.num_classes, d.input_dim, d.samples_per_class, d.separation, d.noise_std,
                       cfg.seed, tuple(d.split))


def _train(section: TrainingSection, seed: int) -> TrainConfig:
    return TrainConfig(section.learning_rate, section.momentum, section.epochs, section.batch_size, seed)


def base_train_config(cfg: ExperimentConfig) -> TrainConfig:
    return _train(cfg.base_training.training, cfg.seed + 1)


def base_widths(cfg: ExperimentConfig) -> List[int]:
    b = cfg.base_training
    return block_widths(b.num_blocks, b.block_width, b.block_widths)


def layer_profile(cfg: ExperimentConfig) -> LayerProfile:
    b = cfg.base_training
    if isinstance(b.layer_latency_ms, list):
        if len(b.layer_latency_ms) != b.num_blocks:
            raise ValueError(f"{len(b.layer_latency_ms)} layer latencies for {b.num_blocks} blocks")
        return LayerProfile(tuple(b.layer_latency_ms))
    return LayerProfile.uniform(b.num_blocks, b.layer_latency_ms)


def cache_training_config(cfg: ExperimentConfig) -> CacheTrainingConfig:
    c = cfg.cache_training
    return CacheTrainingConfig(_train(c.predictor, cfg.seed), _train(c.selector, cfg.seed), c.temperature, c.mix,
                               c.w_fp, c.w_fn, c.target_accuracy, tuple(c.threshold_grid))


def variant_menu(cfg: ExperimentConfig) -> List[ArchSpec]:
    if not cfg.variants:
        raise ValueError("variant menu is empty")
    return [parse_arch(text) for text in cfg.variants]


def cost_model(cfg: ExperimentConfig) -> CostModel:
    c = cfg.cost_model
    return CostModel(c.ms_per_mac, c.bytes_per_param, c.overhead_ms)


def composer_config(cfg: ExperimentConfig) -> ComposerConfig:
    c = cfg.composer
    return ComposerConfig(c.accuracy_threshold, c.memory_budget_mb, c.alpha, c.max_concurrent_lookups,
                          tuple(c.alpha_grid))


def workload_spec(cfg: ExperimentConfig) -> WorkloadSpec:
    w = cfg.workload
    return WorkloadSpec(cfg.dataset.num_classes, w.zipf_skew, w.rotation_period_min, w.request_rate_per_s,
                        w.duration_min, cfg.seed + 2)


def adaptation_config(cfg: ExperimentConfig) -> AdaptationConfig:
    return AdaptationConfig(**asdict(cfg.adaptation))


def dag_path(cfg: ExperimentConfig) -> Path:
    """DAG file, relative to the config file's directory unless absolute"""
    path = Path(cfg.planner.dag)
    return path if path.is_absolute() else Path(cfg.source_dir) / path
