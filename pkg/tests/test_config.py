import pytest

from branchdit.cli import build_parser, resolve_config
from branchdit.config import CONFIG_ENV, ConfigError, RunConfig


def test_parse_and_model_overrides():
    cfg = RunConfig.parse("""
        # comment
        steps = 12
        lr = 0.5   # trailing comment
        d_model = 32
        base_frequency = 50
        adapters = a.cila, b.cila
        prompt = 1,2,3
        no_mutual = yes
    """)
    assert (cfg.steps, cfg.lr, cfg.adapters, cfg.prompt, cfg.no_mutual) == (12, 0.5, ["a.cila", "b.cila"],
                                                                              [1, 2, 3], True)
    mc = cfg.model_config()
    assert mc.d_model == 32 and mc.base_frequency == 50.0


@pytest.mark.parametrize("text", ["nonsense = 1", "steps = many", "just words", "no_cache = maybe"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_invalid_model_combination():
    with pytest.raises(ConfigError):
        RunConfig.parse("heads = 5").model_config()


def test_env_default_and_flags_win(tmp_path, monkeypatch):
    conf = tmp_path / "run.cfg"
    conf.write_text("steps = 7\nseed = 3\n")
    monkeypatch.setenv(CONFIG_ENV, str(conf))
    args = build_parser().parse_args(["train", "--steps", "9", "--set", "lr=0.25"])
    cfg = resolve_config(args)
    assert (cfg.steps, cfg.seed, cfg.lr) == (9, 3, 0.25)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.cfg")


def test_paths_checked_before_work(tmp_path):
    cfg = RunConfig(checkpoint=str(tmp_path / "none.ditb"))
    with pytest.raises(ConfigError):
        cfg.check_paths(checkpoint=True)
    with pytest.raises(ConfigError):
        RunConfig().check_paths(dataset=True)
    with pytest.raises(ConfigError):
        RunConfig(conditions=["spatial"]).check_paths(conditions=True)
