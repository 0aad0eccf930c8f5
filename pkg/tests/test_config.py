from __future__ import annotations

from pathlib import Path

import pytest

from combo import gridworld as gw
from combo.config import ExperimentConfig, apply_overrides, load_config


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = ExperimentConfig()
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dumps())
    assert load_config(p).to_dict() == cfg.to_dict()


def test_overrides_reach_nested_sections():
    cfg = load_config(None, ["planner.P=2", "cwm.stage1_steps=7", "environment.n_agents=2",
                             "model.heads.steps=11", "evaluation.kinds=[clockwise]"])
    assert cfg.planner.P == 2 and cfg.cwm.stage1_steps == 7
    assert cfg.environment.n_agents == 2 and cfg.heads.steps == 11
    assert cfg.evaluation.kinds == ("clockwise",)


def test_override_syntax_errors():
    with pytest.raises(gw.ConfigError):
        apply_overrides({}, ["planner.P"])
    with pytest.raises(gw.ConfigError):
        apply_overrides({"planner": {"P": 3}}, ["planner.P.x=1"])


def test_unknown_keys_are_rejected():
    with pytest.raises(gw.ConfigError):
        load_config(None, ["nonsense.a=1"])
    with pytest.raises(gw.ConfigError):
        load_config(None, ["training.bogus=1"])


def test_config_directory_variable(tmp_path, monkeypatch):
    (tmp_path / "small.yaml").write_text("environment:\n  n_agents: 2\n")
    monkeypatch.setenv("COMBO_CONFIG_DIR", str(tmp_path))
    assert load_config("small.yaml").environment.n_agents == 2


def test_bad_values_become_config_errors():
    with pytest.raises(gw.ConfigError):
        load_config(None, ["cwm.init=sideways"])
    with pytest.raises(gw.ConfigError):
        load_config(None, ["planner.P=0"])


def test_shipped_default_file_matches_the_code_defaults():
    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert load_config(path).to_dict() == ExperimentConfig().to_dict()
