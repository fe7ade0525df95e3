import json

import pytest

from anchorcl.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    load_config,
)


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return str(path)


def test_minimal_config_materializes_all_defaults(tmp_path):
    path = write_config(tmp_path, {"dataset": {"classes": 10},
                                   "split": {"classes_per_task": 2, "task_count": 5}})
    cfg = load_config(path)
    assert cfg.hyperparameters.lwf_weight == 0.5
    assert cfg.hyperparameters.robust_lwf_weight == 0.05
    assert cfg.hyperparameters.consistency_weight == 0.2
    assert cfg.hyperparameters.kd_temperature == 2.0
    assert cfg.ensemble.k_neighbors == 50
    assert abs(cfg.attack.epsilon - 8 / 255) < 1e-12
    assert abs(cfg.attack.alpha - 2 / 255) < 1e-12
    assert cfg.attack.steps == 10 and cfg.attack.eval_steps == 20
    assert cfg.training.epochs == 20 and cfg.training.momentum == 0.9
    assert (cfg.training.batch_cb, cfg.training.batch_rs, cfg.training.batch_ud) == (64, 64, 128)
    echo = cfg.to_dict()
    assert echo["mode"] == "standard"
    assert echo["query"]["method"] == "feature_knn"


def test_unknown_key_is_named_in_error(tmp_path):
    path = write_config(tmp_path, {"dataset": {"classses": 10}})
    with pytest.raises(ConfigError, match="dataset.classses"):
        load_config(path)
    path2 = write_config(tmp_path, {"warmup": 5}, name="c2.json")
    with pytest.raises(ConfigError, match="warmup"):
        load_config(path2)


def test_duplicate_key_is_rejected(tmp_path):
    path = write_config(tmp_path, '{"mode": "standard", "mode": "robust"}')
    with pytest.raises(ConfigError, match="duplicate key 'mode'"):
        load_config(path)


def test_split_exceeding_class_count_rejected():
    with pytest.raises(ConfigError, match="split needs 15"):
        config_from_dict({"dataset": {"classes": 10},
                          "split": {"classes_per_task": 3, "task_count": 5}})


def test_type_errors_are_descriptive():
    with pytest.raises(ConfigError, match="training.epochs"):
        config_from_dict({"training": {"epochs": "twenty"}})
    with pytest.raises(ConfigError, match="ensemble.enabled"):
        config_from_dict({"ensemble": {"enabled": 1}})


def test_enum_fields_validated():
    with pytest.raises(ConfigError, match="mode"):
        config_from_dict({"mode": "both"})
    with pytest.raises(ConfigError, match="query.method"):
        config_from_dict({"query": {"method": "oracle"}})
    with pytest.raises(ConfigError, match="lwf_kind"):
        config_from_dict({"hyperparameters": {"lwf_kind": "l2"}})


def test_attack_invariants_checked():
    with pytest.raises(ConfigError):
        config_from_dict({"attack": {"epsilon": 2.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"attack": {"steps": -1}})


def test_manifest_paths_checked(tmp_path):
    with pytest.raises(ConfigError, match="dataset.path"):
        config_from_dict({"dataset": {"kind": "manifest"}})
    with pytest.raises(ConfigError, match="does not exist"):
        config_from_dict({"dataset": {"kind": "manifest", "path": str(tmp_path / "nope")}})


def test_query_without_pool_rejected():
    with pytest.raises(ConfigError, match="pool.kind"):
        config_from_dict({"pool": {"kind": "none"}})
    # a single-task split never queries, so a missing pool is fine there
    cfg = config_from_dict({"pool": {"kind": "none"},
                            "split": {"classes_per_task": 2, "task_count": 1}})
    assert cfg.pool.kind == "none"


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    path = write_config(tmp_path, "{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_config_echo_roundtrips_through_loader():
    cfg = ExperimentConfig()
    again = config_from_dict(cfg.to_dict())
    assert again == cfg
