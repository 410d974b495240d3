import numpy as np
import pytest
from hypothesis import given, strategies as st

from nodalmc.config import ConfigError, compile_function, load_config

GOOD = """\
model = "interval"
seed = 3

[run]
dt = 0.001
T = 0.5
N = 400

[estimators]
functionals = ["1", "x"]
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(GOOD)
    return p


def test_load_and_defaults(cfg_file):
    cfg = load_config(cfg_file)
    assert cfg.model == "interval" and cfg.seed == 3 and cfg.N == 400
    assert cfg.theta_array().tolist() == [0.0]
    prop = cfg.propagation()
    assert prop.dt == 0.001 and prop.mode == "plain"
    # a model default fills what the file leaves out
    assert cfg.setting("grid_h") == 0.005


def test_overrides_and_digest(cfg_file):
    a = load_config(cfg_file)
    b = load_config(cfg_file, ["run.N=800", "theta=[0.1]"])
    assert b.N == 800 and b.theta_array().tolist() == [0.1]
    assert a.digest() != b.digest()
    assert load_config(cfg_file, threads=4).digest() == a.digest()
    assert load_config(cfg_file, seed=9).seed == 9
    assert len(a.digest()) == 16


@pytest.mark.parametrize("edit, line, fragment", [
    ("N = 400", 7, "run.N"),
    ("dt = 0.001", 5, "run.dt"),
])
def test_type_errors_carry_the_line(cfg_file, edit, line, fragment):
    cfg_file.write_text(GOOD.replace(edit, edit.split("=")[0] + '= "many"'))
    with pytest.raises(ConfigError, match=rf"run.toml:{line}: {fragment}"):
        load_config(cfg_file)


def test_unknown_keys_and_models(cfg_file):
    cfg_file.write_text(GOOD.replace("T = 0.5", "T = 0.5\nsteps = 3"))
    with pytest.raises(ConfigError, match=r"run.toml:7: run.steps: unknown key"):
        load_config(cfg_file)
    cfg_file.write_text(GOOD.replace('"interval"', '"nowhere"'))
    with pytest.raises(ConfigError, match="run.toml:1: model"):
        load_config(cfg_file)
    cfg_file.write_text(GOOD + "\n[extra]\na = 1\n")
    with pytest.raises(ConfigError, match="unknown key 'extra'"):
        load_config(cfg_file)


def test_bad_values_are_config_errors(cfg_file):
    with pytest.raises(ConfigError, match="--set run.mode"):
        load_config(cfg_file, ["run.mode=sideways"])
    with pytest.raises(ConfigError):
        load_config(cfg_file, ["run.dt=-1.0"])
    with pytest.raises(ConfigError):
        load_config(cfg_file, ["noequals"])
    with pytest.raises(ConfigError):
        load_config(cfg_file, ["a.b.c=1"])
    with pytest.raises(ConfigError):
        load_config(cfg_file, ["theta=[1, 2, 3]"])


def test_syntax_error_and_missing_file(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("model = \n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(p)
    with pytest.raises(OSError):
        load_config(tmp_path / "absent.toml")


def test_compile_function_basics():
    pts = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
    assert compile_function("x^2 + y*z", 3)(pts).tolist() == [7.0, 0.25]
    assert compile_function("x3 - x1", 3)(pts).tolist() == [2.0, -0.5]
    assert compile_function("1", 3)(pts).tolist() == [1.0, 1.0]
    assert compile_function("exp(0)*cos(pi)", 3)(pts).tolist() == [-1.0, -1.0]
    named = {"f": lambda x: x[:, 0]}
    assert compile_function("f", 3, named) is named["f"]


@pytest.mark.parametrize("expr", ["__import__('os')", "x.real", "open(1)", "w + 1",
                                  "lambda: 1", "x[0]", "(x"])
def test_compile_function_rejects_unsafe_or_unknown(expr):
    with pytest.raises(ConfigError):
        compile_function(expr, 2)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 3))
def test_compiled_polynomial_matches_numpy(a, b, k):
    f = compile_function(f"{a!r} * x^{k} + {b!r} * y", 2)
    x = np.array([[0.3, -1.2], [1.7, 0.4]])
    assert np.allclose(f(x), a * x[:, 0] ** k + b * x[:, 1])
