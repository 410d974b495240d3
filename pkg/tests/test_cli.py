import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nodalmc.cli import CSV_HEADER, ResultRecord, main, render_csv, write_outputs
from nodalmc.core import UsageError

SMALL = """\
model = "interval"
seed = 5

[run]
dt = 0.002
T = 0.4
N = 400
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_dmc_csv_layout_and_repeatability(cfg, tmp_path):
    a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
    assert main(["dmc", "--config", str(cfg), "--out", str(a), "--no-timing"]) == 0
    assert main(["dmc", "--config", str(cfg), "--out", str(b), "--no-timing",
                 "--threads", "3", "--set", "run.block_size=100"]) == 0
    assert main(["dmc", "--config", str(cfg), "--out", str(c), "--no-timing",
                 "--set", "run.block_size=100"]) == 0
    assert b.read_bytes() == c.read_bytes()
    rows = _rows(a)
    assert tuple(rows[0]) == CSV_HEADER
    names = [r["quantity"] for r in rows]
    assert names == ["energy", "energy_mixed", "eta:1", "eta:x", "alive_fraction"]
    assert all(r["walltime_s"] == "" and r["seed"] == "5" for r in rows)
    assert len({r["config_digest"] for r in rows}) == 1
    assert float(rows[1]["value"]) == pytest.approx(np.pi**2 / 2, rel=1e-9)


def test_json_output_and_timing(cfg, tmp_path):
    out = tmp_path / "r.json"
    assert main(["vmc", "--config", str(cfg), "--out", str(out),
                 "--set", "run.vmc_steps=100", "--set", "run.vmc_chains=32"]) == 0
    data = json.loads(out.read_text())
    assert [d["quantity"] for d in data] == ["vmc_energy", "vmc_sample_variance"]
    assert data[0]["walltime_s"] >= 0


def test_oracle_command(cfg, tmp_path):
    out = tmp_path / "o.csv"
    assert main(["oracle", "--config", str(cfg), "--out", str(out), "--set", "grid.h=0.01",
                 "--set", 'grid.functionals=["1"]', "--set", "grid.fd_gradient=true"]) == 0
    rows = {r["quantity"]: float(r["value"]) for r in _rows(out)}
    assert rows["oracle_energy"] == pytest.approx(np.pi**2 / 2, rel=1e-3)
    assert rows["oracle_mu:1"] == pytest.approx(1.0, rel=1e-6)
    assert rows["oracle_fd_gradient[0]"] == pytest.approx(-np.pi**2, rel=1e-2)


def test_exit_codes(cfg, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("N = 400", "N = \"x\""))
    assert main(["dmc", "--config", str(bad)]) == 2
    assert "bad.toml:7: run.N" in capsys.readouterr().err
    assert main(["dmc", "--config", str(tmp_path / "none.toml")]) == 4
    assert main(["dmc", "--config", str(cfg), "--out", str(tmp_path / "no" / "dir.csv")]) == 4
    # an offset above the groundstate makes the weights grow
    assert main(["mu", "--config", str(cfg), "--set", "run.lam=8.0"]) == 3


def test_models_subcommands(capsys):
    assert main(["models", "list"]) == 0
    assert "odd_well3d" in capsys.readouterr().out
    assert main(["models", "describe", "interval", "--set", "theta=0.5"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["references"]["energy"] == pytest.approx(np.pi**2 / 4.5)
    assert main(["models", "describe", "nowhere"]) == 2


def test_write_outputs_rejects_nonsense(tmp_path):
    with pytest.raises(UsageError):
        write_outputs([], None)
    with pytest.raises(UsageError):
        write_outputs([ResultRecord("q", 1.0, 0.0, 1.0, 0, "d")], None, "xml")


@given(st.lists(st.floats(allow_nan=False, width=64), min_size=1, max_size=4))
def test_csv_values_roundtrip_exactly(values):
    rec = ResultRecord("v", np.array(values), np.zeros(len(values)), 1.0, 0, "abc")
    rows = list(csv.DictReader(io.StringIO(render_csv([rec]))))
    assert [r["quantity"] for r in rows] == [f"v[{i}]" for i in range(len(values))]
    assert [float(r["value"]) for r in rows] == values
