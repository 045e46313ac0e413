import json

import pytest

from metaboot.base import ConfigError
from metaboot.config import (
    PRESET_NAMES,
    PRESETS,
    SEED_ENV,
    SWEEP_NAMES,
    SWEEPS,
    ExperimentConfig,
    from_dict,
    load_config,
    resolve,
    sweep_grid,
)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_are_valid(name):
    cfg = load_config(preset=name)
    for key, value in PRESETS[name].items():
        expected = tuple(value) if isinstance(value, list) else value
        assert getattr(cfg, key) == expected


def test_full_preset_hyperparameters():
    cfg = load_config(preset="full-ac")
    assert (cfg.K, cfg.L, cfg.inner_lr, cfg.rollout_len, cfg.hidden_width) == (1, 7, 0.1, 16, 256)
    assert cfg.meta_lr == 1e-4 and cfg.adam_eps == 1e-4
    q = load_config(preset="full-q")
    assert (q.L, q.q_lambda, q.q_lr, q.stats_window) == (4, 0.7, 3e-5, 50)


def test_desk_presets_run_ten_seeds():
    assert load_config(preset="desk-ac").run_seeds == tuple(range(10))
    assert ExperimentConfig(seed=4).run_seeds == (4,)


def test_config_file_overrides_preset(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "desk-ac", "L": 3, "seeds": [1, 2]}))
    cfg = load_config(path, preset="full-q")
    assert cfg.experiment == "twocolors-ac"
    assert cfg.L == 3 and cfg.seeds == (1, 2)


@pytest.mark.parametrize("data,field", [
    ({"bogus": 1}, "bogus"),
    ({"K": "2"}, "K"),
    ({"K": 1.5}, "K"),
    ({"trajectory_dump": 1}, "trajectory_dump"),
    ({"K": 0}, "K"),
    ({"gamma": 1.0}, "gamma"),
    ({"fixed_epsilon": 1.5}, "fixed_epsilon"),
    ({"mode": "sgd"}, "mode"),
    ({"matching": "kl"}, "matching"),
    ({"meta_lr": -1e-3}, "meta_lr"),
    ({"final_step_lr": 0.0}, "final_step_lr"),
    ({"theory_beta_grid": [1e-3, 1e-2]}, "theory_beta_grid"),
    ({"experiment": "multitask", "matching": "value_l2"}, "matching"),
])
def test_invalid_configs_name_the_field(data, field):
    with pytest.raises(ConfigError) as exc:
        from_dict(data)
    assert exc.value.field == field


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listing)
    with pytest.raises(ConfigError):
        load_config(preset="nope")


def test_seed_precedence():
    cfg = ExperimentConfig(seeds=(1, 2, 3))
    assert resolve(cfg, seed=7, env={}).run_seeds == (7,)
    assert resolve(cfg, seed=7, env={SEED_ENV: "11"}).run_seeds == (11,)
    assert resolve(cfg, env={}) is cfg
    assert resolve(cfg, out_dir="elsewhere", env={}).out_dir == "elsewhere"
    with pytest.raises(ConfigError):
        resolve(cfg, env={SEED_ENV: "eleven"})


def test_replace_and_to_dict_round_trip():
    cfg = ExperimentConfig(seeds=(0, 1))
    d = cfg.to_dict()
    assert d["seeds"] == [0, 1]
    assert from_dict(d) == cfg
    changed = cfg.replace(L=2)
    assert changed.L == 2 and cfg.L == 7
    with pytest.raises(ConfigError):
        cfg.replace(L=-1)


def test_final_step_lr_defaults_to_inner_lr():
    assert ExperimentConfig(inner_lr=0.2).resolved_final_step_lr == 0.2
    assert ExperimentConfig(final_step_lr=0.05).resolved_final_step_lr == 0.05


@pytest.mark.parametrize("name", SWEEP_NAMES)
def test_named_sweeps_give_valid_configs(name):
    base = load_config(preset="desk-ac")
    for field, values in SWEEPS[name].items():
        for value in values:
            base.replace(**{field: value}).validate()


def test_meta_lr_sweep_grid():
    assert sweep_grid("meta-lr") == {"meta_lr": [3e-6, 1e-5, 3e-5, 1e-4, 3e-4]}
    merged = sweep_grid("entropy", {"L": [4]})
    assert merged["fixed_epsilon"] == [0.0, 0.01, 0.03, 0.1, 0.3] and merged["L"] == [4]
    assert sweep_grid(None, {"K": [1, 2]}) == {"K": [1, 2]}
    with pytest.raises(ConfigError):
        sweep_grid("learning-rate")
