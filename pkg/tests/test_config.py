from pathlib import Path

import numpy as np
import pytest

from cellfit.config import PRESETS, ConfigError, load_config, parse_config
from cellfit.models import YeastThreshold

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_parse(name):
    cfg = parse_config({"preset": name})
    assert cfg.c0 is not None and cfg.spec.n_free >= 2
    assert np.all(cfg.c0 >= cfg.spec.lower) and np.all(cfg.c0 <= cfg.spec.upper)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.output.is_absolute()


def test_motility_values():
    cfg = load_config(CONFIGS / "motility_sharp.toml")
    assert cfg.spec.names == ["kp_2", "gamma", "k_b"]
    assert np.array_equal(cfg.c0, [3.75e-2, 25.0, 1.15e-2])
    assert np.array_equal(cfg.c_true, [5e-2, 20.0, 1e-2])
    assert np.allclose(cfg.times, np.arange(11.0))
    assert cfg.solver.n_vertices == 128 and cfg.solver.dt == 1e-2


def test_overrides():
    cfg = load_config(CONFIGS / "motility_sharp.toml", output="elsewhere", seed=99)
    assert cfg.output == Path("elsewhere") and cfg.seed == 99


def test_times_list_and_range():
    a = parse_config({"preset": "motility_sharp", "data": {"times": [0.0, 0.5, 1.0]}})
    b = parse_config({"preset": "motility_sharp", "data": {"times": {"start": 0.0, "stop": 1.0, "step": 0.5}}})
    assert np.allclose(a.times, b.times)


def test_smoothstep_option():
    cfg = parse_config({"preset": "yeast_synthetic", "model": {"smoothstep_transition": True}})
    assert isinstance(cfg.spec.forcing, YeastThreshold)
    assert cfg.spec.forcing.smoothstep


@pytest.mark.parametrize("raw", [
    {"preset": "motility_sharp", "model": {"free": [{"name": "gamma", "lower": 0.0, "upper": 10.0, "initial": 20.0}]}},
    {"preset": "motility_sharp", "model": {"free": [{"name": "gamma", "initial": 20.0}]}},
    {"preset": "motility_sharp", "objective": {"weights": [1.0, 2.0]}},
    {"preset": "motility_sharp", "perturb": {"distributions": ["cauchy"]}},
    {"preset": "motility_sharp", "scan": {"parameters": ["gamma", "sigma"]}},
    {"preset": "motility_sharp", "noise": {"k_n": -0.1}},
])
def test_rejections(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)
