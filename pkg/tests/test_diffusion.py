import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodalmc.core import UsageError
from nodalmc.diffusion import (
    PropagationConfig,
    _bridge_probability,
    _island_resample,
    continue_to_exit,
    island_layout,
    propagate_ensemble,
)
from nodalmc.models import make_model

INTERVAL = make_model("interval")


def _run(N=2000, seed=3, **kw):
    cfg = PropagationConfig(**{"dt": 1e-3, "T": 1.0, **kw})
    return propagate_ensemble(INTERVAL.model, INTERVAL.family, [0.0], cfg, N, seed), cfg


@pytest.fixture(scope="module")
def interval_run():
    return _run()


@pytest.mark.parametrize("kw", [dict(dt=0.0, T=1.0), dict(dt=0.1, T=-1.0),
                                dict(dt=0.1, T=1.0, mode="fancy"),
                                dict(dt=0.1, T=1.0, n_islands=0),
                                dict(dt=0.1, T=1.0, roulette=1.5),
                                dict(dt=0.1, T=1.0, burn_in=2.0),
                                dict(dt=0.1, T=1.0, ess_fraction=0.0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(UsageError):
        PropagationConfig(**kw)


@given(st.integers(2, 10_000), st.integers(1, 200))
def test_island_layout_partitions_population(N, k):
    groups, edges = island_layout(N, k)
    K = edges.size - 1
    assert K == min(k, N // 2)
    assert edges[0] == 0 and edges[-1] == N
    assert np.all(np.diff(edges) >= 1)
    assert np.array_equal(np.bincount(groups), np.diff(edges))


@settings(max_examples=60)
@given(st.integers(4, 300), st.integers(1, 6), st.integers(0, 2**31))
def test_island_resample_stays_inside_islands(N, k, seed):
    rng = np.random.default_rng(seed)
    groups, edges = island_layout(N, k)
    K = edges.size - 1
    w = rng.exponential(size=N) * (rng.random(N) < 0.7)
    tot = np.add.reduceat(w, edges[:-1])
    flag = (rng.random(K) < 0.6) & (tot > 0)
    pick = _island_resample(w, groups, edges, flag, rng.random(K))
    assert np.array_equal(groups[pick], groups)
    moved = flag[groups]
    assert np.all(w[pick[moved]] > 0)
    assert np.array_equal(pick[~moved], np.flatnonzero(~moved))


def test_island_resample_is_systematic():
    w = np.array([1.0, 0.0, 3.0, 0.0, 2.0, 2.0])
    groups, edges = island_layout(6, 2)
    pick = _island_resample(w, groups, edges, np.array([True, True]), np.array([0.4, 0.4]))
    assert pick.tolist() == [0, 2, 2, 4, 4, 5]


def test_bridge_probability_limits():
    d = np.array([0.0, 1e-3, 1.0])
    p = _bridge_probability(d, d, 1e-3)
    assert p[0] == 1.0 and p[2] == 0.0
    assert p[1] == pytest.approx(np.exp(-2e-3))
    assert _bridge_probability(np.array([-1.0]), np.array([1.0]), 0.1)[0] == 1.0


def test_mean_weight_is_one_and_history_is_normalisation(interval_run):
    ens, cfg = interval_run
    assert len(ens.history) == cfg.n_steps
    assert np.exp(ens.log_weights[ens.alive]).sum() / ens.size == pytest.approx(1.0, rel=1e-9)
    assert ens.log_normalisation() == pytest.approx(sum(m for _, m in ens.history), abs=1e-9)
    assert ens.island_log_norm.shape == (cfg.n_steps + 1, ens.stats["islands"])
    assert np.all(ens.positions[ens.alive] > 0)
    assert np.all(ens.positions[ens.alive] < 1)


def test_decay_rate_matches_groundstate(interval_run):
    ens, _ = interval_run
    rate = -sum(m for _, m in ens.history[500:]) / (500 * ens.dt)
    assert rate == pytest.approx(np.pi**2 / 2, rel=0.05)


def test_same_seed_same_ensemble_regardless_of_threads():
    a, _ = _run(N=1500, seed=11, T=0.2, block_size=400)
    b, _ = _run(N=1500, seed=11, T=0.2, block_size=400, threads=3)
    c, _ = _run(N=1500, seed=12, T=0.2, block_size=400)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.log_weights, b.log_weights)
    assert a.history == b.history
    assert not np.array_equal(a.positions, c.positions)


def test_initial_positions_must_be_inside():
    cfg = PropagationConfig(dt=1e-3, T=0.01)
    with pytest.raises(UsageError):
        propagate_ensemble(INTERVAL.model, INTERVAL.family, [0.0], cfg, 4, 0,
                           initial=np.array([[0.5], [0.2], [1.5], [0.3]]))
    with pytest.raises(UsageError):
        propagate_ensemble(INTERVAL.model, INTERVAL.family, [0.0], cfg, 1, 0)


def test_continuation_exits_on_the_ends(interval_run):
    ens, cfg = interval_run
    hs = continue_to_exit(ens, INTERVAL.model, INTERVAL.family, [0.0], cfg, seed=3)
    assert len(hs) == ens.n_alive
    pts = hs.points[hs.exited, 0]
    assert np.all(np.minimum(np.abs(pts), np.abs(pts - 1)) <= 2 * cfg.bisection_tol)
    assert hs.censored_fraction < 1e-3
    # zero offset: every unit of weight eventually exits
    assert hs.hit_weights().sum() / hs.den_weights().sum() == pytest.approx(1.0, abs=0.05)
    assert np.all(hs.hit_weights()[~hs.exited] == 0)


def test_continuation_needs_a_decaying_history(interval_run):
    ens, cfg = interval_run
    grown = ens.copy()
    grown.history = [(t, abs(m)) for t, m in ens.history]
    with pytest.raises(UsageError):
        continue_to_exit(grown, INTERVAL.model, INTERVAL.family, [0.0], cfg, seed=3)


def test_drifted_harmonic_keeps_variance_at_zero():
    e = make_model("harmonic1d")
    cfg = PropagationConfig(dt=0.01, T=0.5, mode="drifted", init="trial")
    ens = propagate_ensemble(e.model, e.family, [0.0], cfg, 500, 2)
    assert all(m == pytest.approx(-0.5 * 0.01, abs=1e-12) for _, m in ens.history)
