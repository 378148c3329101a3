import math

import pytest

from xtune.config import (SEED_ENV, ConfigError, ScenarioConfig, TunerConfig, default_config_text,
                          load_config, parse_config)


def test_default_file_matches_dataclass_defaults():
    cfg = load_config(env={})
    base = ScenarioConfig()
    assert cfg.Ts == base.Ts and cfg.N_H == base.N_H and cfg.N == 75
    assert cfg.tuner == base.tuner
    assert cfg.dlc == base.dlc
    assert math.isinf(cfg.snr_db)


def test_parse_overrides():
    cfg = parse_config("""
[scenario]
Ts = 0.05
window_seconds = 2.0
snr_db = 10
[dlc]
entry_speed_kph = 72
[tuner]
kind = ukf
params = q_vx, q_w, r_delta
j_threshold = 3.5
spsa_pairs = 4
[plant]
M = 1700
randomize_M = 0
""")
    assert cfg.Ts == 0.05 and cfg.N == 40 and cfg.nmpc.Ts == 0.05
    assert cfg.dlc.entry_speed == pytest.approx(20.0)
    assert cfg.tuner.kind == "ukf" and cfg.tuner.p == 3 and cfg.tuner.num_pairs == 4
    assert cfg.tuner.j_threshold == 3.5 and cfg.snr_db == 10
    assert cfg.plant.nominal.M == 1700 and "M" not in cfg.plant.randomization


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[scenario]\nbogus = 1\n",
    "[scenario]\nTs = fast\n",
    "[scenario]\nwindow_seconds = 0.05\n",
    "[scenario]\nsnr_db = nan\n",
    "[tuner]\nkind = magic\n",
    "[tuner]\nparams = q_vx, q_vx\n",
    "[tuner]\nparams = q_nothing\n",
    "[tuner]\nlow = 2\n",
    "[tuner]\ngamma = 1.5\n",
    "[tuner]\nenergy_gate = maybe\n",
    "[dlc]\nsection_lengths = 1, 2\n",
    "not an ini file",
])
def test_invalid_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_seed_environment_override(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[scenario]\nseed = 3\n")
    assert load_config(f, env={}).seed == 3
    assert load_config(f, env={SEED_ENV: "11"}).seed == 11
    with pytest.raises(ConfigError):
        load_config(f, env={SEED_ENV: "eleven"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini", env={})


def test_default_text_round_trips():
    assert parse_config(default_config_text()) == load_config(env={})


def test_tuner_config_pairs_default():
    assert TunerConfig(params=("q_vx", "q_w", "q_s")).num_pairs == 3
