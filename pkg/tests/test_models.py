import json

import numpy as np
import pytest

from nodalmc.core import UsageError
from nodalmc.models import evaluate_trial, list_models, make_model

STEP = 1e-5


def _params(e):
    return e.theta0 + 0.07 * np.arange(1, e.family.n_params + 1) / e.family.n_params


def _points(e, n=100, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = e.model.lower, e.model.upper
    if hasattr(e.family, "domain"):
        lo, hi = e.family.domain(e.theta0)
    span = np.minimum(hi - lo, 4.0)
    mid = 0.5 * (lo + hi)
    return mid + span * (rng.random((n, e.model.dimension)) - 0.5) * 0.9


@pytest.mark.parametrize("name", ["interval", "square", "harmonic1d", "two_fermion_trap",
                                  "odd_well3d", "n_fermion_trap_1d"])
def test_derivatives_match_central_differences(name):
    params = {"alpha": 0.1} if name == "n_fermion_trap_1d" else {}
    e = make_model(name, params)
    f, th, x = e.family, _params(e), _points(e)
    d = x.shape[1]
    val = f.value(th, x)
    scale = 1.0 + np.abs(val)
    fd_grad = np.stack([(f.value(th, x + STEP * np.eye(d)[k]) - f.value(th, x - STEP * np.eye(d)[k]))
                        / (2 * STEP) for k in range(d)], axis=1)
    assert np.max(np.abs(fd_grad - f.grad(th, x)) / scale[:, None]) < 1e-6
    fd_th = np.stack([(f.value(th + STEP * np.eye(th.size)[k], x)
                       - f.value(th - STEP * np.eye(th.size)[k], x)) / (2 * STEP)
                      for k in range(th.size)], axis=1)
    assert np.max(np.abs(fd_th - f.theta_grad(th, x)) / scale[:, None]) < 1e-6
    h = 1e-4
    fd_lap = sum((f.value(th, x + h * np.eye(d)[k]) - 2 * val + f.value(th, x - h * np.eye(d)[k]))
                 / h**2 for k in range(d))
    assert np.max(np.abs(fd_lap - f.laplacian(th, x)) / (1 + np.abs(fd_lap))) < 1e-4
    fd_lt = np.stack([(f.laplacian(th + STEP * np.eye(th.size)[k], x)
                       - f.laplacian(th - STEP * np.eye(th.size)[k], x)) / (2 * STEP)
                      for k in range(th.size)], axis=1)
    lt = f.laplacian_theta_grad(th, x)
    assert np.max(np.abs(fd_lt - lt) / (1 + np.abs(lt))) < 1e-5


def test_odd_well_examples():
    e = make_model("odd_well3d")
    x = np.array([0.0, 1.0, 0.0])
    assert evaluate_trial(e, [0, 0], x) == 0.0
    tg = evaluate_trial(e, [0, 0], x, "theta_grad")
    assert tg == pytest.approx([np.exp(-1.0), 0.0])
    assert e.references["energy"] == 4.0


def test_two_fermion_vanishes_on_coincidence():
    e = make_model("two_fermion_trap")
    a = np.linspace(-3, 3, 13)
    x = np.column_stack([a, a])
    for th in (0.0, 0.1, -0.15):
        assert np.all(evaluate_trial(e, [th], x) == 0.0)


def test_interval_gradient_at_right_end():
    e = make_model("interval")
    g = evaluate_trial(e, [0.0], np.array([1.0 - 1e-12]), "grad")
    assert g[0] == pytest.approx(-np.pi, rel=1e-9)


def test_interval_energy_reference():
    assert make_model("interval", {"theta": 0.5}).references["energy"] == pytest.approx(2.1932, abs=1e-4)


def test_sign_structure_under_odd_elements():
    for name in ("two_fermion_trap", "odd_well3d"):
        e = make_model(name)
        x = _points(e, 200, 1)
        th = _params(e)
        pos = x[e.family.value(th, x) > 0]
        for op in e.model.group.odd_elements():
            assert np.all(e.family.value(th, op(pos)) < 0)


def test_catalog_listing_and_describe_roundtrip():
    assert set(list_models()) >= {"interval", "harmonic1d", "two_fermion_trap", "odd_well3d"}
    d = make_model("odd_well3d").describe()
    assert json.loads(json.dumps(d))["n_params"] == 2
    assert len(d["test_functions"]) == 8


def test_unknown_names_raise():
    with pytest.raises(UsageError):
        make_model("nope")
    with pytest.raises(UsageError):
        make_model("interval", {"bogus": 1})
    with pytest.raises(UsageError):
        evaluate_trial(make_model("interval"), [0.0], [0.5], "hessian")


def test_interacting_two_fermion_is_experimental():
    e = make_model("two_fermion_trap", {"coupling": 1.0})
    assert e.experimental and "energy" not in e.references
