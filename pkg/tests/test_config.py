import pytest

from mffm.config import ConfigError, ExperimentConfig, load_config, parse_config

BASE = """
[experiment]
benchmark = burgers
resolutions = 16, 32, 64
n_samples = 30
seed = 5
output_dir = out

[model]
hidden = 32, 32
blocks = 2, 2

[train]
lr = 1e-3
epochs_pretrain = 3
dtype = float32

[source]
kind = diagonal

[source.level_1]
kind = calibrated_blur
tau = 2.0
"""


def test_parse_values_and_level_overrides():
    cfg = parse_config(BASE)
    assert cfg.benchmark == "burgers" and cfg.resolutions == (16, 32, 64)
    assert cfg.train.lr == 1e-3 and cfg.train.epochs_pretrain == 3 and cfg.train.dtype == "float32"
    assert [s.kind for s in cfg.sources] == ["diagonal", "calibrated_blur"]
    assert cfg.sources[1].tau == 2.0 and cfg.sources[0].tau == 1.5


def test_experiment_seed_drives_training_seed():
    assert parse_config(BASE).train.seed == 5
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("lr = 1e-3", "lr = 1e-3\nseed = 3"))


def test_config_echo_round_trips():
    cfg = parse_config(BASE)
    assert parse_config(cfg.to_text()) == cfg
    assert ExperimentConfig().to_text() == parse_config(ExperimentConfig().to_text()).to_text()


@pytest.mark.parametrize("bad", [
    "[experiment]\nbenchmark = heat\n",
    "[experiment]\nresolutions = 16, 24\n",
    "[experiment]\nn_samples = 5\n",
    "[experiment]\ncolour = red\n",
    "[extras]\na = 1\n",
    "[model]\nhidden = 32\n",
    "[train]\nlr = fast\n",
    "[source]\nkind = laplace\n",
    "[source.level_2]\nkind = diagonal\n",
    "[experiment]\nvariant = bogus\n",
    "not a config",
])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
    p = tmp_path / "c.ini"
    p.write_text(BASE)
    assert load_config(p).seed == 5


def test_with_variant():
    cfg = parse_config(BASE)
    assert cfg.with_variant("single").variant == "single"
    assert cfg.variant == "none"
