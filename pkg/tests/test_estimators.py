import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodalmc.core import NumericalError, UsageError
from nodalmc.diffusion import HittingSamples, PropagationConfig, propagate_ensemble
from nodalmc.estimators import (
    EstimateWithError,
    StatisticalWarning,
    blocking_analysis,
    blocking_error,
    estimate_energy_extinction,
    estimate_energy_mixed,
    estimate_eta,
    estimate_mu,
    estimate_vmc_energy,
    jackknife,
    symmetry_diagnostic,
)
from nodalmc.models import make_model


def test_jackknife_of_a_mean_matches_textbook_error():
    x = np.random.default_rng(0).standard_normal(4000)
    val, cov, B = jackknife(lambda t: t[:1] / t[1], np.column_stack([x, np.ones_like(x)]), 40)
    assert B == 40
    assert val[0] == pytest.approx(x.mean())
    assert math.sqrt(cov[0, 0]) == pytest.approx(x.std() / math.sqrt(x.size), rel=0.3)


@settings(max_examples=40)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_jackknife_of_a_linear_statistic_is_exact(K, seed):
    rng = np.random.default_rng(seed)
    n = 5 * K
    groups = rng.permutation(np.arange(n) % K)
    rows = rng.standard_normal(n)
    _, cov, B = jackknife(lambda t: t, rows, groups=groups)
    b = np.bincount(groups, weights=rows, minlength=K)
    assert B == K
    assert cov[0, 0] == pytest.approx((K - 1) * np.var(b), rel=1e-9)


def test_blocking_detects_correlation():
    rng = np.random.default_rng(1)
    e = rng.standard_normal(2**14)
    x = np.empty_like(e)
    x[0] = e[0]
    for i in range(1, x.size):
        x[i] = 0.9 * x[i - 1] + e[i]
    naive = x.std() / math.sqrt(x.size)
    se, size, ok = blocking_analysis(x)
    assert ok and size > 1
    # integrated autocorrelation time of AR(1) with 0.9 is 19
    assert se / naive == pytest.approx(math.sqrt(19), rel=0.3)
    assert blocking_analysis(np.ones(32)) == (0.0, 1, True)
    with pytest.raises(UsageError):
        blocking_analysis(np.ones(8))


def test_weighted_blocking_matches_ratio_error():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal(4096), rng.exponential(size=4096)
    naive = math.sqrt(np.sum(w**2 * (x - np.average(x, weights=w)) ** 2)) / w.sum()
    assert blocking_error(x, w) == pytest.approx(naive, rel=0.3)


def test_estimate_with_error_z_and_validation():
    assert EstimateWithError(0.0, 0.0, 1, "m").z == 0.0
    assert EstimateWithError(2.0, 0.5, 1, "m").z == 4.0
    assert EstimateWithError(1.0, 0.0, 1, "m").z == math.inf
    with pytest.raises(ValueError):
        EstimateWithError(1.0, -1.0, 1, "m")


@pytest.fixture(scope="module")
def harmonic_drifted():
    e = make_model("harmonic1d")
    cfg = PropagationConfig(dt=0.01, T=1.0, mode="drifted", init="trial")
    return e, propagate_ensemble(e.model, e.family, [0.0], cfg, 4000, 4)


def test_drifted_eta_is_the_squared_groundstate(harmonic_drifted):
    e, ens = harmonic_drifted
    eta = estimate_eta(ens)
    assert eta.density == "psi_fn*psi_trial"
    m = eta.mean(lambda x: x[:, 0] ** 2)
    # density exp(-x^2) has second moment one half
    assert abs(m.value - 0.5) < 3 * m.std_error + 0.01
    plain = estimate_eta(ens, unguided=True, family=e.family)
    assert plain.density == "psi_fn"
    m1 = plain.mean(lambda x: x[:, 0] ** 2)
    assert abs(m1.value - 1.0) < 3 * m1.std_error + 0.02


def test_exact_trial_gives_zero_variance_energies(harmonic_drifted):
    e, ens = harmonic_drifted
    mixed = estimate_energy_mixed(ens, e.model, e.family)
    assert mixed.value == pytest.approx(0.5, abs=1e-12)
    assert mixed.std_error == pytest.approx(0.0, abs=1e-12)
    ext = estimate_energy_extinction(ens)
    assert ext.value == pytest.approx(0.5, abs=1e-9)
    vmc = estimate_vmc_energy(e.model, e.family, [0.0], n_steps=200, n_chains=64, seed=1,
                              proposal_scale=1.0)
    assert vmc.value == 0.5 and vmc.std_error == 0.0


def test_two_fermion_vmc_is_exactly_two():
    e = make_model("two_fermion_trap")
    vmc = estimate_vmc_energy(e.model, e.family, [0.0], n_steps=300, n_chains=64, seed=0,
                              proposal_scale=1.0)
    assert vmc.value == 2.0 and vmc.metadata["sample_variance"] == 0.0


def test_interval_energies_agree_with_groundstate():
    e = make_model("interval")
    cfg = PropagationConfig(dt=5e-4, T=1.5)
    ens = propagate_ensemble(e.model, e.family, [0.0], cfg, 3000, 9)
    exact = np.pi**2 / 2
    ext = estimate_energy_extinction(ens)
    assert ext.method == "extinction-rate/island-jackknife"
    assert ext.n_effective == 50
    assert abs(ext.value - exact) < 3 * ext.std_error + 0.05
    mixed = estimate_energy_mixed(ens, e.model, e.family)
    # sin is the exact groundstate, so the plain-mode mixed ratio is exact too
    assert mixed.value == pytest.approx(exact, rel=1e-9)


def _synthetic_hits(n=600, seed=0):
    rng = np.random.default_rng(seed)
    right = rng.random(n) < 0.3
    pts = np.where(right, 1.0, 0.0)[:, None]
    cens = np.zeros(n, dtype=bool)
    cens[:3] = True
    return HittingSamples(
        points=pts, log_weights=np.zeros(n), exit_times=rng.random(n), censored=cens,
        log_den=np.zeros(n), eta_points=rng.random((n, 1)), lam=0.0,
        groups=np.arange(n) % 20,
    )


def test_mu_functionals_on_synthetic_exits():
    hs = _synthetic_hits()
    mu = estimate_mu(hs, functionals={"x": lambda x: x[:, 0]})
    ok = hs.exited
    assert mu.mass.value == pytest.approx(ok.sum() / len(hs))
    assert mu.functionals["x"].value == pytest.approx(hs.points[ok, 0].sum() / len(hs))
    assert mu.censored_fraction == pytest.approx(3 / 600)
    assert mu.integrate(lambda x: np.ones(len(x))) == pytest.approx(mu.mass.value)
    with pytest.warns(StatisticalWarning):
        hs.censored[:20] = True
        estimate_mu(hs)
    with pytest.raises(UsageError):
        estimate_mu(hs, denominator_weights=np.ones(3))
    with pytest.raises(NumericalError):
        estimate_mu(hs, denominator_weights=np.zeros(len(hs)))


def test_symmetry_diagnostic_rules():
    e = make_model("two_fermion_trap")
    rng = np.random.default_rng(3)
    a = rng.standard_normal((800, 2))
    pts = np.where(rng.random(800)[:, None] < 0.5, a, a[:, ::-1])
    n = len(pts)
    hs = HittingSamples(pts, np.zeros(n), np.ones(n), np.zeros(n, bool), np.zeros(n), pts, 0.0,
                        groups=np.arange(n) % 25)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StatisticalWarning)
        res = dict(symmetry_diagnostic(hs, e.model.group, {"x1-x2": lambda x: x[:, 0] - x[:, 1],
                                                           "zero": lambda x: 0 * x[:, 0]}))
        assert res["zero"] == 0.0
        assert abs(res["x1-x2"]) < 4
        with pytest.raises(UsageError):
            symmetry_diagnostic(hs, e.model.group, {"x1": lambda x: x[:, 0]})
