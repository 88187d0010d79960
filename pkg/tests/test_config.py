from __future__ import annotations

import pytest
import yaml

from motionanim.config import CONFIG_ENV, SCHEMA, ConfigError, RunConfig, config_from_dict, load_config, save_config


def test_defaults_roundtrip(tmp_path):
    cfg = RunConfig()
    save_config(tmp_path / "c.yaml", cfg)
    assert load_config(tmp_path / "c.yaml") == cfg


def test_partial_file_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text(f"schema: {SCHEMA}\nseed: 7\noptim:\n  lr: 0.001\n  betas: [0.8, 0.99]\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == 7 and cfg.optim.lr == 0.001 and cfg.optim.betas == (0.8, 0.99)
    assert cfg.model == RunConfig().model


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match=r"config.model: unknown key\(s\) \['widht'\]"):
        config_from_dict({"schema": SCHEMA, "model": {"widht": 3}})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"schema": SCHEMA, "extras": 1})


def test_schema_required_and_checked():
    with pytest.raises(ConfigError, match="missing its 'schema'"):
        config_from_dict({"seed": 1})
    with pytest.raises(ConfigError, match="unsupported config schema"):
        config_from_dict({"schema": "motionanim.run/0"})


def test_bad_section_type():
    with pytest.raises(ConfigError, match="expected a mapping"):
        config_from_dict({"schema": SCHEMA, "train": 5})


def test_env_var_used_when_no_path(tmp_path, monkeypatch):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"schema": SCHEMA, "seed": 11}))
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "c.yaml"))
    assert load_config().seed == 11
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config() == RunConfig()


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "bad.yaml").write_text("schema: [unclosed\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(tmp_path / "bad.yaml")


def test_override_ignores_none_and_validates():
    cfg = RunConfig().override("train", steps=10, checkpoint_every=None)
    assert cfg.train.steps == 10 and cfg.train.checkpoint_every == RunConfig().train.checkpoint_every
    assert RunConfig().override("", seed=3).seed == 3
    assert RunConfig().override("data", scenes=None) == RunConfig()
    with pytest.raises(ConfigError):
        RunConfig().override("train", nope=1)
