import math
import os

import pytest

from miadip.config import (
    RunConfig,
    config_from_dict,
    config_from_toml,
    default_config_toml,
)
from miadip.errors import ConfigError


def test_defaults_round_trip_through_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(default_config_toml())
    assert config_from_toml(str(path)) == RunConfig()


def test_partial_file_keeps_other_defaults(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("[task]\ndim = 48\nsource_classes = 6\n")
    cfg = config_from_toml(str(path))
    assert cfg.task.dim == 48
    assert cfg.task.source_classes == 6
    assert cfg.task.target_classes == RunConfig().task.target_classes
    assert cfg.transfer == RunConfig().transfer


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="did you mean 'variant'"):
        config_from_dict({"transfer": {"varient": "tl"}})


def test_unknown_key_without_close_match_lists_valid():
    with pytest.raises(ConfigError, match="valid keys:"):
        config_from_dict({"task": {"zzz": 1}})


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown key 'tasks'"):
        config_from_dict({"tasks": {"dim": 10}})


def test_nested_attack_tables():
    cfg = config_from_dict(
        {"attack": {"bim": {"alpha": 0.5}, "hsj": {"max_queries": 99}}}
    )
    assert cfg.attack_bim.alpha == 0.5
    assert cfg.attack_hsj.max_queries == 99
    with pytest.raises(ConfigError, match="did you mean 'hsj'"):
        config_from_dict({"attack": {"hsi": {}}})


def test_type_errors_are_loud():
    with pytest.raises(ConfigError, match="must be an integer"):
        config_from_dict({"task": {"dim": 1.5}})
    with pytest.raises(ConfigError, match="must be a boolean"):
        config_from_dict({"transfer": {"head_replace": 1}})
    with pytest.raises(ConfigError, match="must be a number"):
        config_from_dict({"task": {"overlap": True}})
    with pytest.raises(ConfigError, match="must be a list"):
        config_from_dict({"arch": {"hidden": 64}})


def test_variant_and_sigma_unions_validated():
    assert config_from_dict({"transfer": {"frozen_layers": "best"}}) is not None
    assert config_from_dict({"smooth": {"sigma": 0.25}}).smooth.sigma == 0.25
    with pytest.raises(ConfigError, match="frozen_layers"):
        config_from_dict({"transfer": {"frozen_layers": "deepest"}})
    with pytest.raises(ConfigError, match="variant"):
        config_from_dict({"transfer": {"variant": "dropout"}})
    with pytest.raises(ConfigError, match="sigma"):
        config_from_dict({"smooth": {"sigma": "auto"}})
    with pytest.raises(ConfigError, match="sigma"):
        config_from_dict({"smooth": {"sigma": -0.1}})
    with pytest.raises(ConfigError, match="sigmas"):
        config_from_dict({"sweep": {"sigmas": ["tuned"]}})
    with pytest.raises(ConfigError, match="m_fracs"):
        config_from_dict({"sweep": {"m_fracs": [1.5]}})


def test_budget_builder_maps_clips():
    cfg = config_from_dict({})
    b = cfg.budget()
    assert b.bim.clip_lo is None and b.bim.clip_hi is None
    cfg = config_from_dict({"attack": {"bim": {"clip_lo": -2.0, "clip_hi": 2.0}}})
    b = cfg.budget()
    assert b.bim.clip_lo == -2.0 and b.bim.clip_hi == 2.0
    assert b.hsj.max_queries == cfg.attack_hsj.max_queries


def test_task_config_builder_overrides_n():
    cfg = RunConfig()
    tc = cfg.task_config(seed=7, target_train_n=128)
    assert tc.seed == 7
    assert tc.target_train_n == 128
    assert tc.dim == cfg.task.dim
    assert cfg.task_config(3).target_train_n == cfg.task.target_train_n


def test_print_config_serializes_infinities():
    text = RunConfig().to_toml()
    assert "clip_lo = -inf" in text
    assert "clip_hi = inf" in text
    assert 'frozen_layers = "best"' in text


def test_missing_file_is_config_error():
    with pytest.raises(ConfigError, match="not found"):
        config_from_toml("/nonexistent/path.toml")


def test_invalid_toml_is_config_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[task\ndim = 3\n")
    with pytest.raises(ConfigError, match="not valid TOML"):
        config_from_toml(str(path))


DEMO_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "demo.toml")


def test_demo_config_parses():
    cfg = config_from_toml(DEMO_CONFIG)
    assert cfg.sweep.variants == ("tl",)
    assert cfg.task.dim == 64
    assert math.isinf(cfg.attack_bim.clip_hi)
