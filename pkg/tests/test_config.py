import json

import pytest

from imbalanced_supcon.config import (DataConfig, RunConfig, SeedConfig, default_log_level,
                                      default_out_dir, default_workers, load_config)
from imbalanced_supcon.errors import InvalidConfig


def test_defaults_validate():
    config = RunConfig().validate()
    assert config.loss.kind == "supcon"
    assert config.encoder.init == "near-collapsed"
    assert config.loss.anchor_mode == "all-views"


def test_round_trip_through_dict():
    config = RunConfig()
    config.encoder.hidden = (8, 4)
    restored = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert restored == config
    assert restored.encoder.hidden == (8, 4)


def test_run_id_hashes_the_body_only():
    config = RunConfig(out_dir="a")
    other = RunConfig(out_dir="b")
    assert len(config.run_id) == 16
    int(config.run_id, 16)
    assert config.run_id == other.run_id
    assert config.with_value("loss.tau", 0.5).run_id != config.run_id
    assert "out_dir" not in config.body()


def test_with_value_copies():
    config = RunConfig()
    changed = config.with_value("optimizer.batch_size", 64)
    assert changed.optimizer.batch_size == 64
    assert config.optimizer.batch_size == 256
    assert config.with_value("evaluate_bound", False).evaluate_bound is False
    with pytest.raises(InvalidConfig):
        config.with_value("loss.temperature", 0.5)


def test_with_seed_sets_every_slot():
    seeded = RunConfig().with_seed(7)
    assert seeded.seeds == SeedConfig(data=7, init=7, batch=7, augment=7)


def test_unknown_keys_are_rejected():
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"loss": {"temperature": 0.1}})


def test_augmentation_noise_follows_spread():
    assert DataConfig(spread=2.0).aug_sigma == pytest.approx(0.2)
    assert DataConfig(spread=2.0, aug_sigma=0.0).aug_sigma == 0.0


@pytest.mark.parametrize("key, value", [
    ("data.imbalance", 0.6),
    ("data.n", 3),
    ("data.minority_label", 2),
    ("encoder.backend", "transformer"),
    ("encoder.eta", 0.5),
    ("loss.kind", "triplet"),
    ("loss.tau", 0.0),
    ("loss.theta_maj", 1.5),
    ("loss.k", 0),
    ("optimizer.momentum", 1.0),
    ("optimizer.batch_size", 5000),
    ("optimizer.schedule", "step"),
    ("metrics.r_fraction", 1.0),
    ("metrics.tie_break", "nearest"),
    ("probe.optimizer", "adam"),
    ("seeds.data", -1),
])
def test_validation_errors(key, value):
    with pytest.raises(InvalidConfig):
        RunConfig().with_value(key, value).validate()


def test_batch_limit_uses_the_training_split_for_mlp():
    config = RunConfig.from_dict({"data": {"n": 100}, "optimizer": {"batch_size": 90}})
    config.validate()
    with pytest.raises(InvalidConfig):
        config.with_value("encoder.backend", "mlp").validate()
    config.with_value("optimizer.sampler", "oversample").with_value("encoder.backend", "mlp").validate()


def test_load_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"loss": {"kind": "sup-minority", "tau": 0.1}}))
    config = load_config(path)
    assert config.loss.kind == "sup-minority"
    assert config.loss.tau == 0.1
    assert config.data == DataConfig()


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_load_config_errors(tmp_path, content):
    path = tmp_path / "c.json"
    path.write_text(content)
    with pytest.raises(InvalidConfig):
        load_config(path)
    with pytest.raises(InvalidConfig):
        load_config(tmp_path / "missing.json")


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv("SUPCON_OUT_DIR", "elsewhere")
    monkeypatch.setenv("SUPCON_WORKERS", "4")
    monkeypatch.setenv("SUPCON_LOG_LEVEL", "debug")
    assert default_out_dir() == "elsewhere"
    assert RunConfig().out_dir == "elsewhere"
    assert default_workers() == 4
    assert default_log_level() == "DEBUG"
    monkeypatch.setenv("SUPCON_WORKERS", "many")
    assert default_workers() == 1
    monkeypatch.setenv("SUPCON_WORKERS", "0")
    assert default_workers() == 1
