"""TOML config loading: defaults, overrides, and rejection paths."""

import math

import pytest

from ampctune.config import AppConfig, ConfigError, load_config


def _write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text, encoding="utf-8")
    return p


def test_none_path_gives_defaults():
    cfg = load_config(None)
    assert cfg == AppConfig()
    assert cfg.experiment.n_instances == 20
    assert cfg.experiment.episodes == 18
    assert cfg.experiment.seeds == (0, 1, 2)
    assert cfg.experiment.methods == ("turbo", "sobol")
    assert cfg.tune.episodes == 18
    assert cfg.mpc.n_horizon == 50
    assert cfg.episode.duration == 20.0


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(_write(tmp_path, "")) == AppConfig()


def test_overrides_reach_each_section(tmp_path):
    cfg = load_config(_write(tmp_path, """
[mpc]
n_horizon = 8
dt = 0.05

[dataset]
n_samples = 30
box_lower = [-0.3, -3.14159, -2.0, -6.0]
box_upper = [0.3, 3.14159, 2.0, 6.0]

[train]
epochs = 3
lr_schedule = "cosine"
action_hidden = [16, 16]

[episode]
duration = 2.0
control_rate = 10.0
sim_dt = 0.01

[tune]
episodes = 4
method = "sobol"

[experiment]
n_instances = 2
seeds = [7]
methods = ["turbo"]
"""))
    assert cfg.mpc.n_horizon == 8 and cfg.mpc.dt == 0.05
    assert cfg.dataset.n_samples == 30
    assert cfg.dataset.box_lower == (-0.3, -3.14159, -2.0, -6.0)
    assert cfg.train.epochs == 3
    assert cfg.train.lr_schedule == "cosine"
    assert cfg.train.action_hidden == (16, 16)
    assert cfg.episode.duration == 2.0
    assert cfg.tune.episodes == 4 and cfg.tune.method == "sobol"
    assert cfg.experiment.n_instances == 2
    assert cfg.experiment.seeds == (7,)
    assert cfg.experiment.methods == ("turbo",)


def test_integer_values_fill_float_fields(tmp_path):
    cfg = load_config(_write(tmp_path, "[episode]\nduration = 2\n"))
    assert cfg.episode.duration == 2.0
    assert isinstance(cfg.episode.duration, float)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_bad_toml_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(_write(tmp_path, "[mpc\nn_horizon = 8"))


def test_unknown_table_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config tables: solver"):
        load_config(_write(tmp_path, "[solver]\nx = 1\n"))


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"\[tune\] has unknown keys: budget"):
        load_config(_write(tmp_path, "[tune]\nbudget = 9\n"))


def test_wrong_type_rejected(tmp_path):
    with pytest.raises(ConfigError, match="expected an integer"):
        load_config(_write(tmp_path, "[experiment]\nn_instances = 2.5\n"))
    with pytest.raises(ConfigError, match="boolean"):
        load_config(_write(tmp_path, "[experiment]\nn_instances = true\n"))


def test_boolean_fields_roundtrip(tmp_path):
    cfg = load_config(_write(tmp_path, "[train]\nmirror_augment = true\n"))
    assert cfg.train.mirror_augment is True
    with pytest.raises(ConfigError, match="expected a boolean"):
        load_config(_write(tmp_path, "[train]\nmirror_augment = 1\n"))


def test_section_validation_failures_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match=r"\[tune\]"):
        load_config(_write(tmp_path, "[tune]\nmethod = 'annealing'\n"))
    with pytest.raises(ConfigError, match=r"\[experiment\]"):
        load_config(_write(tmp_path, "[experiment]\nseeds = []\n"))
    with pytest.raises(ConfigError, match=r"\[episode\]"):
        # control period is not an integer multiple of the sim step
        load_config(_write(tmp_path, "[episode]\nsim_dt = 0.003\n"))
    with pytest.raises(ConfigError, match=r"\[mpc\]"):
        load_config(_write(tmp_path, "[mpc]\nn_horizon = 0\n"))
    with pytest.raises(ConfigError, match=r"\[train\]"):
        load_config(_write(tmp_path, "[train]\nlr_schedule = 'step'\n"))


def test_dataset_box_must_be_ordered(tmp_path):
    with pytest.raises(ConfigError, match="strictly below"):
        load_config(_write(tmp_path, """
[dataset]
box_lower = [0.3, -3.1, -2.0, -6.0]
box_upper = [-0.3, 3.1, 2.0, 6.0]
"""))


def test_default_box_covers_swingup_rates():
    cfg = load_config(None)
    assert cfg.dataset.box_upper[3] >= 14.0
    assert cfg.dataset.box_lower[1] == -math.pi
