import pytest

from openworldseg.runconfig import ConfigError, RunConfig, load_config, parse_config_text


def test_defaults_match_published_values():
    cfg = RunConfig()
    assert cfg.t_value == 3.0
    assert cfg.lambda_vl == 0.01
    assert cfg.beta == 20.0
    assert cfg.gamma == 0.8
    assert cfg.lambda_novel == 1.5
    assert cfg.momentum == 0.9
    assert cfg.learning_rate == 0.02
    assert cfg.weight_decay == 1e-4
    assert cfg.shots <= 5


def test_parse_file_text():
    cfg = parse_config_text("seed = 9\nbeta=5.5\nmode = plm\nhflip = false\n")
    assert cfg.seed == 9
    assert cfg.beta == 5.5
    assert cfg.mode == "plm"
    assert cfg.hflip is False


def test_comments_and_blanks_ignored():
    cfg = parse_config_text("# a comment\n\nseed = 3\n")
    assert cfg.seed == 3


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("warp_speed = 9\n")


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("iterations = soon\n")


def test_lambda_out_auto():
    cfg = parse_config_text("lambda_out = auto\n")
    assert cfg.lambda_out is None
    cfg = parse_config_text("lambda_out = 0.65\n")
    assert cfg.lambda_out == 0.65


def test_mode_validated():
    with pytest.raises(ConfigError, match="mode"):
        parse_config_text("mode = both\n").validate()


def test_overrides_after_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nbeta = 10\n")
    cfg = load_config(path, ["seed=2", "gamma=0.5"])
    assert cfg.seed == 2
    assert cfg.beta == 10.0
    assert cfg.gamma == 0.5


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "absent.cfg")


def test_dashes_normalised():
    cfg = parse_config_text("lambda-novel = 2.0\n")
    assert cfg.lambda_novel == 2.0


def test_shot_bounds():
    with pytest.raises(ConfigError, match="shots"):
        parse_config_text("shots = 6\n").validate()
