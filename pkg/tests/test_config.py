from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from flaggnn.augment import StrategyConfig
from flaggnn.config import config_echo, dump_config, load_config, parse_config
from flaggnn.errors import ConfigError
from flaggnn.train import ModelSpec, OptimizerConfig, TrainConfig


def test_load_resolves_relative_paths(toy_config):
    cfg = load_config(toy_config)
    assert Path(cfg.data.graph) == toy_config.parent / "edges.txt"
    assert cfg.strategy == StrategyConfig("flag", 3, 0.01, 0.01)
    assert cfg.model.hidden == (8,) and cfg.epochs == 12


def test_defaults_when_sections_missing():
    cfg = parse_config("")
    assert cfg == TrainConfig()
    assert cfg.optimizer == OptimizerConfig("adam", 0.01, 0.9, 0.999, 1e-8)


def test_overrides_bare_and_qualified():
    cfg = parse_config("[strategy]\nstrategy = flag\n", ["M=5", "strategy.alpha_u=0.02", "hidden=16,8"])
    assert cfg.strategy.M == 5 and cfg.strategy.alpha_u == 0.02 and cfg.model.hidden == (16, 8)


def test_epsilon_none_and_value():
    assert parse_config("[strategy]\nstrategy = pgd\nepsilon = 0.1\n").strategy.epsilon == 0.1
    assert parse_config("[strategy]\nstrategy = clean\nepsilon = none\n").strategy.epsilon is None


@pytest.mark.parametrize("text,overrides,needle", [
    ("[strategy]\nbogus = 1\n", [], "bogus"),
    ("[nope]\nx = 1\n", [], "nope"),
    ("", ["bogus=1"], "bogus"),
    ("", ["M"], "key=value"),
    ("[strategy]\nM = three\n", [], "strategy.M"),
    ("[train]\nfree_budget = maybe\n", [], "train.free_budget"),
    ("[strategy]\nstrategy = flag\nepsilon = 0.1\n", [], "epsilon"),
    ("[optimizer]\nlr = -1\n", [], "learning rate"),
    ("[train]\nepochs = 0\n", [], "epochs"),
    ("not an ini", [], "malformed"),
])
def test_config_errors_name_the_key(text, overrides, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text, overrides)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.ini")


def test_echo_uses_file_keys():
    echo = config_echo(TrainConfig(strategy=StrategyConfig("flag", M=3)))
    assert echo["strategy"] == "flag" and echo["M"] == 3 and echo["norm"] == "sign"


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(["clean", "fgsm", "pgd", "free", "freelb", "flag"]),
       m=st.integers(1, 10), a=st.floats(0, 1), b=st.floats(0, 1), norm=st.sampled_from(["sign", "l2"]),
       hidden=st.lists(st.integers(1, 64), max_size=3), epochs=st.integers(1, 500),
       seed=st.integers(0, 2**31), free=st.booleans(), wd=st.floats(0, 1e-2))
def test_dump_round_trips(kind, m, a, b, norm, hidden, epochs, seed, free, wd):
    eps = 0.1 if kind == "pgd" else None
    cfg = TrainConfig(epochs=epochs, seed=seed, free_budget=free,
                      strategy=StrategyConfig(kind, m, a, b, eps, norm),
                      optimizer=OptimizerConfig("sgd", 0.5, weight_decay=wd),
                      model=ModelSpec(hidden=tuple(hidden)))
    assert parse_config(dump_config(cfg)) == cfg


def test_shipped_configs_parse():
    root = Path(__file__).parent.parent / "configs"
    for path in sorted(root.glob("*.ini")):
        cfg = load_config(path)
        assert Path(cfg.data.graph).name == "edges.txt"
