"""Experiment config: schema checks, defaults, hashing and environment paths"""

import json
from pathlib import Path

import pytest

from configlib import (ConfigError, ExperimentConfig, adaptation_config, cache_training_config, composer_config,
                       config_from_dict, config_hash, config_to_dict, dag_path, dataset_spec, default_paths,
                       layer_profile, load_config, variant_menu, with_seed, workload_spec, write_config)

REPO = Path(__file__).parent.parent


def _payload(**sections):
    data = {'version': 1}
    data.update(sections)
    return data


def test_shipped_config_is_the_default():
    cfg = load_config(REPO / "configs" / "experiment.json")
    assert cfg == ExperimentConfig()
    assert dag_path(cfg) == REPO / "configs" / "traffic_dag.json"


def test_missing_sections_take_defaults():
    cfg = config_from_dict(_payload(seed=3))
    assert cfg.seed == 3
    assert cfg.dataset == ExperimentConfig().dataset


def test_present_section_must_be_complete():
    partial = config_to_dict(ExperimentConfig())['dataset']
    del partial['noise_std']
    with pytest.raises(ConfigError, match=r"dataset\.noise_std"):
        config_from_dict(_payload(dataset=partial))


def test_unknown_keys_are_rejected_with_their_path():
    with pytest.raises(ConfigError, match="colour: unknown key"):
        config_from_dict(_payload(colour="blue"))
    section = config_to_dict(ExperimentConfig())['base_training']
    section['training']['warmup'] = 3
    with pytest.raises(ConfigError, match=r"base_training\.training\.warmup"):
        config_from_dict(_payload(base_training=section))


def test_null_section_is_an_error():
    with pytest.raises(ConfigError, match="must not be null"):
        config_from_dict(_payload(composer=None))


def test_version_is_required():
    with pytest.raises(ConfigError, match="version"):
        config_from_dict({'seed': 1})


def test_type_errors_name_the_field():
    section = config_to_dict(ExperimentConfig())['workload']
    section['zipf_skew'] = "steep"
    with pytest.raises(ConfigError, match=r"workload\.zipf_skew"):
        config_from_dict(_payload(workload=section))
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict(_payload(seed=True))


def test_range_errors_name_the_section():
    section = config_to_dict(ExperimentConfig())['adaptation']
    section['sample_rate'] = 1.5
    with pytest.raises(ConfigError, match="adaptation"):
        config_from_dict(_payload(adaptation=section))
    section = config_to_dict(ExperimentConfig())['composer']
    section['alpha'] = "auto"
    with pytest.raises(ConfigError, match="composer"):
        config_from_dict(_payload(composer=section))
    with pytest.raises(ConfigError, match="variants"):
        config_from_dict(_payload(variants=["MLP(3)"]))


def test_alpha_sweep_and_latency_list():
    composer = config_to_dict(ExperimentConfig())['composer']
    composer['alpha'] = "sweep"
    base = config_to_dict(ExperimentConfig())['base_training']
    base['num_blocks'] = 3
    base['layer_latency_ms'] = [1, 2, 3]
    cfg = config_from_dict(_payload(composer=composer, base_training=base))
    assert composer_config(cfg).alpha == "sweep"
    assert layer_profile(cfg).latencies == (1.0, 2.0, 3.0)

    base['layer_latency_ms'] = [1, 2]
    with pytest.raises(ConfigError, match="base_training"):
        config_from_dict(_payload(base_training=base))


def test_library_objects_follow_the_config():
    cfg = with_seed(ExperimentConfig(), 5)
    assert dataset_spec(cfg).seed == 5
    assert workload_spec(cfg).seed == 7
    assert workload_spec(cfg).num_classes == cfg.dataset.num_classes
    assert cache_training_config(cfg).predictor.epochs == 30
    assert [a.label for a in variant_menu(cfg)][0] == "FC(1024)"
    assert adaptation_config(cfg).retrain_interval_min == 15.0
    assert with_seed(cfg, None) is cfg


def test_hash_tracks_content(tmp_path):
    cfg = ExperimentConfig()
    assert config_hash(cfg) == config_hash(ExperimentConfig())
    assert len(config_hash(cfg)) == 12
    assert config_hash(with_seed(cfg, 1)) != config_hash(cfg)
    path = tmp_path / "cfg.json"
    write_config(cfg, path)
    assert config_hash(load_config(path)) == config_hash(cfg)
    assert json.loads(path.read_text())['version'] == 1


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_default_paths(monkeypatch):
    monkeypatch.delenv('LATEBIND_CONFIG', raising=False)
    monkeypatch.delenv('LATEBIND_OUT_DIR', raising=False)
    assert default_paths() == (Path("configs/experiment.json"), Path("runs/default"))
    monkeypatch.setenv('LATEBIND_OUT_DIR', "/tmp/elsewhere")
    assert default_paths()[1] == Path("/tmp/elsewhere")
    assert default_paths(None, "mine")[1] == Path("mine")
