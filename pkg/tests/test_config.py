import pytest

from ept.config import (ExperimentConfig, apply_overrides, config_hash, dotted_keys,
                        float_list, int_list, load_config, str_list, to_ini)
from ept.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.projection.n_experts == 4
    assert cfg.fusion.variant == "cross_attention"
    assert cfg.train.steps == 2000 and cfg.train.batch_size == 16
    assert cfg.train.eval_every == 200
    assert cfg.harness.lr_prompt_grid == "0.3,0.4,0.5"
    assert cfg.harness.lr_lowrank_grid == "1e-4,5e-4,5e-3"


def test_every_field_has_a_dotted_key():
    keys = dotted_keys()
    assert "train.lr_prompt" in keys and keys["train.lr_prompt"] is float
    assert keys["ept.use_fusion"] is bool


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nsteps = 50\nlr_prompt = 0.4\n\n[ept]\nuse_fusion = off\n")
    cfg = load_config(path, {"train.steps": "7"})
    assert cfg.train.steps == 7 and cfg.train.lr_prompt == 0.4
    assert cfg.ept.use_fusion is False


def test_ini_round_trip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), {"budget.s": "13", "task.name": "parity"})
    path = tmp_path / "c.ini"
    path.write_text(to_ini(cfg))
    back = load_config(path)
    assert back == cfg and config_hash(back) == config_hash(cfg)


def test_hash_changes_with_values():
    assert config_hash(load_config()) != config_hash(load_config(None, {"train.seed": "1"}))


@pytest.mark.parametrize("overrides", [
    {"train.nope": "1"}, {"train.steps": "ten"}, {"ept.use_fusion": "maybe"},
    {"train.optimizer": "lbfgs"}, {"encoder.n_heads": "3"},
])
def test_bad_values(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_list_helpers():
    assert int_list("0, 1,2") == [0, 1, 2]
    assert float_list("1e-4;0.5") == [1e-4, 0.5]
    assert str_list(" a, b ,") == ["a", "b"]
    with pytest.raises(ConfigError):
        int_list("1,x")
