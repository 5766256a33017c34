import pytest

from fedseg.config import ConfigError, DataConfig, RunConfig, dump_config, load_config, parse_config

FULL = """
[data]
root = somewhere
counts = 5, 6
styles = MR_T2, CT
seeds = 3, 4
slices = 6-8
size = 32
organs = 2

[federation]
rounds = 3
iteration_cap = none
base_lr = 0.01
global_seed = 9

[model]
widths = 8, 16, 32
alpha_p = 10.0

[superpixel]
k = 0.2

[augment]
gamma = 0.8, 1.2

[losses]
edge_dice_weight = 0.5

[output]
dir = runs/x
"""


def test_round_trip_is_identity():
    cfg = parse_config(FULL)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(RunConfig())) == RunConfig()


def test_values_are_resolved():
    cfg = parse_config(FULL)
    assert cfg.data.counts == (5, 6) and cfg.data.slice_spec() == (6, 8)
    assert cfg.fed.iteration_cap is None and cfg.fed.base_lr == 0.01
    assert cfg.fed.eval_classes == (1, 2)
    assert cfg.fed.proto.encoder.widths == (8, 16, 32) and cfg.fed.proto.alpha_p == 10.0
    assert cfg.fed.dice_weights == (1.0, 0.5)
    assert cfg.fed.augment.gamma == (0.8, 1.2)
    assert cfg.out_dir == "runs/x"


def test_counts_without_styles_default_to_mr_t2():
    cfg = parse_config("[data]\ncounts = 5, 5, 5\n")
    assert cfg.data.styles == ("MR_T2",) * 3 and cfg.data.seeds == (1, 2, 3)


def test_baseline_with_dice_weights_is_contradictory():
    with pytest.raises(ConfigError, match="contradicts"):
        parse_config("[federation]\nbaseline = true\n[losses]\nspatial_dice_weight = 1.0\n")
    cfg = parse_config("[federation]\nbaseline = true\n")
    assert cfg.fed.baseline_mode and parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text,match", [
    ("[data]\ncounts = 20, 4\nstyles = CT, CT\nseeds = 1, 2\n", "4:1"),
    ("[data]\nsize = 30\n", "multiple of 4"),
    ("[data]\norgans = 6\n", "organs"),
    ("[data]\nstyles = PET\ncounts = 5\nseeds = 1\n", "unknown style"),
    ("[bogus]\nx = 1\n", "unknown config sections"),
    ("[federation]\nrounds = many\n", "invalid config value"),
    ("[federation]\nbaseline = maybe\n", "boolean"),
    ("not a config", "malformed"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


def test_data_config_direct_validation():
    with pytest.raises(ConfigError):
        DataConfig(counts=(5,), styles=("CT", "CT"), seeds=(1,))
