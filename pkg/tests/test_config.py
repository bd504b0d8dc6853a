import json

from config import (DEFAULT_PENALTY_WEIGHT, DEFAULT_VERIFY_POINTS, config_path, default_config, load_config,
                    save_config, worker_count)


def test_missing_file_gives_defaults():
    config = load_config()
    assert config == default_config()
    assert config["verify_points"] == DEFAULT_VERIFY_POINTS
    assert config["penalty_weight"] == DEFAULT_PENALTY_WEIGHT


def test_save_then_load(tmp_path):
    config = default_config()
    config["last_network"] = str(tmp_path / "grid.network.json")
    config["solver"] = {"gap_tol": 0.01}
    save_config(config)
    assert config_path().exists()
    assert load_config() == config


def test_older_file_gains_new_keys():
    path = config_path()
    path.parent.mkdir(parents=True)
    path.write_text(json.dumps({"last_network": "a.json"}))
    config = load_config()
    assert config["last_network"] == "a.json"
    assert config["verify_points"] == DEFAULT_VERIFY_POINTS


def test_corrupt_file_falls_back_with_warning(caplog):
    path = config_path()
    path.parent.mkdir(parents=True)
    path.write_text("{not json")
    assert load_config() == default_config()
    assert "Could not parse config file" in caplog.text


def test_non_object_file_is_rejected(caplog):
    path = config_path()
    path.parent.mkdir(parents=True)
    path.write_text("[1, 2]")
    assert load_config() == default_config()
    assert "top level must be an object" in caplog.text


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("CCOPF_THREADS", "3")
    assert worker_count() == 3


def test_bad_worker_count_is_ignored(monkeypatch, caplog):
    monkeypatch.setenv("CCOPF_THREADS", "zero")
    assert worker_count(default=2) == 2
    assert "Ignoring CCOPF_THREADS" in caplog.text
