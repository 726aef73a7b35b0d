import pytest

from chromagen.config import SCHEMA, ConfigError, build_config, dump_config, parse_assignments
from chromagen.training import IvaeConfig, TrainConfig


def test_defaults_without_file():
    assert build_config() == TrainConfig()


def test_precedence_defaults_file_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nmodel = cvae_l1\nbatch_size = 32  # trailing\nivae.m = 90\n")
    c = build_config(path, ["batch_size=16"])
    assert (c.model, c.batch_size, c.ivae.m, c.lr) == ("cvae_l1", 16, 90.0, 0.001)
    assert build_config(path).batch_size == 32


def test_value_coercion():
    c = build_config(None, ["adam_betas = 0.9, 0.99", "drop_last = true", "subset = 512",
                            "critic_ratio = none", "lr_schedule = linear_to_zero"])
    assert c.adam_betas == (0.9, 0.99) and c.drop_last is True and c.subset == 512
    assert c.critic_ratio is None and c.lr_schedule == "linear_to_zero"


@pytest.mark.parametrize("line", ["epochs = many", "bogus = 1", "no equals sign",
                                  "adam_betas = 0.5", "drop_last = maybe"])
def test_bad_assignments(line):
    with pytest.raises(ConfigError):
        parse_assignments([line])


def test_unknown_key_lists_known_keys():
    with pytest.raises(ConfigError, match="ivae.alpha"):
        parse_assignments(["ivae.gamma = 1"])


def test_validation_happens_before_use():
    with pytest.raises(ConfigError, match="valid models"):
        build_config(None, ["model=cgan"])
    with pytest.raises(ConfigError):
        build_config(None, ["epochs=-2"])


def test_dump_round_trips(tmp_path):
    c = TrainConfig(model="ivae", seed=3, adam_betas=(0.4, 0.9), ivae=IvaeConfig(beta=0.7), subset=64)
    path = tmp_path / "c"
    path.write_text(dump_config(c))
    assert build_config(path) == c
    assert set(line.split(" = ")[0] for line in dump_config(c).splitlines()) == set(SCHEMA)
