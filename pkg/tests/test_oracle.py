import warnings

import numpy as np
import pytest

from nodalmc.acceptance import ODD_WELL_FD_REFERENCE
from nodalmc.core import UsageError
from nodalmc.models import make_model
from nodalmc.oracle import (
    GridSpec,
    SpectralError,
    analytic_interval_reference,
    boundary_flux_functional,
    dump_solution,
    finite_difference_theta_gradient,
    load_solution,
    solve_dirichlet_groundstate,
    solve_exit_functional,
)

INTERVAL = make_model("interval")


def _interval(h, theta=0.0):
    return solve_dirichlet_groundstate(INTERVAL.model, INTERVAL.family, [theta],
                                       GridSpec.from_spacing([-0.1], [1.3], h))


@pytest.mark.parametrize("kw", [dict(lower=(0.0,), upper=(1.0,), counts=(8,)),
                                dict(lower=(1.0,), upper=(0.0,), counts=(32,)),
                                dict(lower=(0.0, 0.0), upper=(1.0,), counts=(32,)),
                                dict(lower=(0,) * 4, upper=(1,) * 4, counts=(16,) * 4)])
def test_grid_validation(kw):
    with pytest.raises(UsageError):
        GridSpec(**kw)


def test_interval_eigenvalue_converges_at_second_order():
    exact = np.pi**2 / 2
    e1 = _interval(0.01).energy - exact
    e2 = _interval(0.005).energy - exact
    assert 3.2 <= e1 / e2 <= 4.8
    assert abs(e2) < 1e-3


def test_off_grid_interval_end_is_resolved():
    sol = _interval(0.01, theta=0.237)
    assert sol.energy == pytest.approx(np.pi**2 / (2 * 1.237**2), rel=2e-4)
    assert sol.converged and sol.n_components == 1
    assert np.all(sol.values[sol.domain_mask != 2] == 0)
    assert sol.integrate(sol.values**2) == pytest.approx(1.0)


def test_harmonic_groundstate_on_the_box():
    e = make_model("harmonic1d")
    sol = solve_dirichlet_groundstate(e.model, None, None, GridSpec.from_spacing([-6], [6], 0.02))
    assert sol.energy == pytest.approx(0.5, abs=1e-4)


def test_lobpcg_agrees_with_inverse_iteration():
    grid = GridSpec.from_spacing([-0.1], [1.3], 0.01)
    a = solve_dirichlet_groundstate(INTERVAL.model, INTERVAL.family, [0.0], grid, method="inverse")
    b = solve_dirichlet_groundstate(INTERVAL.model, INTERVAL.family, [0.0], grid, method="lobpcg")
    assert a.energy == pytest.approx(b.energy, rel=1e-9)
    with pytest.raises(UsageError):
        solve_dirichlet_groundstate(INTERVAL.model, INTERVAL.family, [0.0], grid, method="qr")


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_exit_functionals_match_closed_form(lam):
    grid = GridSpec.from_spacing([-0.1], [1.3], 0.005)
    ref = analytic_interval_reference(lam=lam)
    sol = solve_dirichlet_groundstate(INTERVAL.model, INTERVAL.family, [0.0], grid)
    for name, phi in (("mass", lambda x: np.ones(len(x))), ("x", lambda x: x[:, 0])):
        _, val = solve_exit_functional(INTERVAL.model, grid, lam, phi, INTERVAL.family, [0.0], sol)
        flux = boundary_flux_functional(sol, INTERVAL.model, lam, phi, INTERVAL.family, [0.0])
        assert val == pytest.approx(ref.mu_functionals[name], rel=1e-3)
        assert flux == pytest.approx(ref.mu_functionals[name], rel=1e-3)


def test_exit_functional_needs_lam_below_spectrum():
    grid = GridSpec.from_spacing([-0.1], [1.3], 0.01)
    with pytest.raises(SpectralError):
        solve_exit_functional(INTERVAL.model, grid, 6.0, lambda x: np.ones(len(x)),
                              INTERVAL.family, [0.0])


def test_analytic_interval_reference():
    ref = analytic_interval_reference(lam=1.0)
    assert ref.mu_functionals["mass"] == pytest.approx(1.2541424, abs=1e-7)
    assert ref.mu_functionals["x"] == pytest.approx(0.6270712, abs=1e-7)
    assert ref.dE_dtheta == pytest.approx(-np.pi**2)
    assert analytic_interval_reference(a=1.0).dE_da == pytest.approx(-np.pi**2 / 4)
    with pytest.raises(UsageError):
        analytic_interval_reference(lam=10.0)


def test_interval_fd_gradient_matches_closed_form():
    grid = GridSpec.from_spacing([-0.1], [1.3], 0.005)
    g = finite_difference_theta_gradient(INTERVAL.model, INTERVAL.family, [0.0], grid, delta=0.01)
    assert g[0] == pytest.approx(-np.pi**2, rel=1e-3)


def test_dump_roundtrip(tmp_path):
    sol = _interval(0.02)
    path, side = dump_solution(sol, tmp_path / "gs.bin")
    grid, energy, data = load_solution(path)
    assert grid == sol.grid and energy == sol.energy
    assert np.array_equal(data, sol.values)
    assert side.exists()
    (tmp_path / "junk").write_bytes(b"0123456789abcdef")
    with pytest.raises(UsageError):
        load_solution(tmp_path / "junk")


@pytest.mark.slow
def test_odd_well_fd_gradient_reproduces_frozen_reference():
    e = make_model("odd_well3d")
    d = e.defaults
    grid = GridSpec.from_spacing(d["grid_lower"], d["grid_upper"], d["grid_h"])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        g = finite_difference_theta_gradient(e.model, e.family, [0.1, 0.0], grid, delta=0.02)
    assert g[0] == pytest.approx(ODD_WELL_FD_REFERENCE, abs=5e-6)
    assert abs(g[1]) < 1e-6
