"""Feynman-Kac walker propagation in a nodal domain.

Walkers live in the positive domain of the trial function. Each step is an
Euler-Maruyama move with trapezoidal log-weight quadrature; leaving the
domain is detected by a sign change of the trial function. Population control
is systematic resampling triggered by a low effective sample size.

Randomness is addressed by ``(seed, tag, block, step)``, where a block is a
fixed slice of ``block_size`` walkers, so results do not depend on how many
threads advance the blocks.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .core import Model, NumericalError, TrialFamily, UsageError, local_energy_batch
from .streams import Tag, block_slices, stream

log = logging.getLogger(__name__)

__all__ = [
    "Walker",
    "Ensemble",
    "PropagationConfig",
    "HittingSample",
    "HittingSamples",
    "ExtinctionError",
    "advance_walker",
    "detect_and_refine_exit",
    "refine_exits",
    "resample_population",
    "propagate_ensemble",
    "continue_to_exit",
    "initial_positions",
]

LOG_FLOOR = -745.0
MAX_BISECTIONS = 60


class ExtinctionError(NumericalError):
    """Every walker left the domain."""


class BisectionWarning(RuntimeWarning):
    pass


@dataclass
class Walker:
    position: np.ndarray
    log_weight: float = 0.0
    clock: float = 0.0
    status: Literal["alive", "exited"] = "alive"
    exit_point: np.ndarray | None = None
    exit_time: float | None = None
    flag: str = ""

    @property
    def alive(self) -> bool:
        return self.status == "alive"


@dataclass(frozen=True)
class PropagationConfig:
    """Time stepping and population control settings.

    Parameters
    ----------
    dt, T : float
        Step and horizon of the burn-in propagation.
    lam : float
        Energy offset in the weights ``exp(-int (V - lam))``; must stay below
        the groundstate energy when hitting weights are needed.
    mode : {"plain", "drifted"}
        Free Brownian motion killed at the node, or drift ``grad psi / psi``
        with local-energy weights and rejected node crossings.
    bridge : bool
        Brownian-bridge correction for crossings inside a step. The walker
        survives a step between two interior points with probability
        ``1 - exp(-2 d0 d1 / dt)``, ``d`` the distance to the node in the
        linearised trial function.
    burn_in : float or None
        Start of the energy averaging window; ``None`` means ``T / 2``.
    drift_cap : bool
        Drifted mode only: shrink the drift near the node so a single step
        cannot overshoot it. Without it walkers can stick next to the node
        with every move rejected.
    init : {"uniform", "trial"}
        Uniform in the box restricted to the positive domain, or a Metropolis
        sample of ``|psi|`` (plain) or ``psi^2`` (drifted) there.
    max_time : float or None
        Cut-off for the continuation to the node; ``None`` means
        ``20 / (E - lam)`` with the energy read off the weight history.
    n_islands : int
        The population is split into this many contiguous groups that are
        normalised and resampled independently. Groups are statistically
        independent, which makes a jackknife over them an honest error bar.
    energy_cap : bool
        Drifted mode only: clip the local energy to within ``2 / sqrt(dt)`` of
        the running population mean, which tames the divergence of the
        local energy next to an inexact node.
    roulette : float or None
        Continuation only: when a walker's weight has dropped by this factor
        it survives with probability 1/10 and has its weight multiplied by 10.
    """

    dt: float
    T: float
    lam: float = 0.0
    mode: Literal["plain", "drifted"] = "plain"
    resample_interval: int = 1
    ess_fraction: float = 0.5
    bisection_tol: float = 1e-2
    burn_in: float | None = None
    bridge: bool = True
    drift_cap: bool = True
    init: Literal["uniform", "trial"] = "uniform"
    init_sweeps: int = 200
    init_step: float = 0.5
    max_time: float | None = None
    threads: int = 1
    block_size: int = 8192
    n_islands: int = 50
    energy_cap: bool = True
    roulette: float | None = 1e-3

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise UsageError("dt must be positive")
        if not self.T >= 0:
            raise UsageError("T must be non-negative")
        if self.mode not in ("plain", "drifted"):
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.init not in ("uniform", "trial"):
            raise UsageError(f"unknown initializer {self.init!r}")
        if not 0 < self.ess_fraction <= 1:
            raise UsageError("ess_fraction must lie in (0, 1]")
        if self.resample_interval < 1:
            raise UsageError("resample_interval must be >= 1")
        if self.burn_in is not None and not 0 <= self.burn_in <= self.T:
            raise UsageError("burn_in must lie in [0, T]")
        if self.threads < 1 or self.block_size < 1:
            raise UsageError("threads and block_size must be >= 1")
        if not self.bisection_tol > 0:
            raise UsageError("bisection_tol must be positive")
        if self.n_islands < 1:
            raise UsageError("n_islands must be >= 1")
        if self.roulette is not None and not 0 < self.roulette < 1:
            raise UsageError("roulette threshold must lie in (0, 1)")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def window_start(self) -> float:
        return 0.5 * self.T if self.burn_in is None else self.burn_in


@dataclass
class Ensemble:
    """Walker population stored as arrays.

    ``history`` holds ``(time, log m)`` pairs: ``m`` is the factor by which
    the total weight of the population (exited walkers count zero) changed
    over the step ending at ``time``. Summing ``log m`` reconstructs the
    normalisation that the stored log weights no longer carry.
    ``island_log_norm[j, k]`` is the log normalisation of island ``k`` after
    step ``j`` (row 0 is time zero); ``groups`` maps walkers to islands.
    """

    positions: np.ndarray
    log_weights: np.ndarray
    alive: np.ndarray
    clock: float
    history: list[tuple[float, float]]
    rng_seed: int
    dt: float
    theta: np.ndarray | None = None
    lam: float = 0.0
    mode: str = "plain"
    config: PropagationConfig | None = None
    stats: dict = field(default_factory=dict)
    groups: np.ndarray | None = None
    island_log_norm: np.ndarray | None = None

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise UsageError("ensemble needs at least one walker")

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    @property
    def walkers(self) -> list[Walker]:
        out = []
        for i in range(self.size):
            a = bool(self.alive[i])
            out.append(Walker(self.positions[i].copy(), float(self.log_weights[i]), self.clock,
                              "alive" if a else "exited"))
        return out

    def weights(self) -> np.ndarray:
        """Alive weights scaled so their maximum is one; exited walkers give 0."""
        w = np.zeros(self.size)
        if self.n_alive:
            lw = self.log_weights[self.alive]
            w[self.alive] = np.exp(lw - lw.max())
        return w

    def effective_size(self) -> float:
        w = self.weights()
        s = w.sum()
        return float(s * s / np.dot(w, w)) if s > 0 else 0.0

    def log_normalisation(self) -> float:
        """``log`` of the mean weight at ``clock`` relative to time zero."""
        tot = sum(m for _, m in self.history)
        return float(tot + _log_mean(self.log_weights, self.alive, self.size))

    def copy(self) -> "Ensemble":
        return replace(
            self,
            positions=self.positions.copy(),
            log_weights=self.log_weights.copy(),
            alive=self.alive.copy(),
            history=list(self.history),
            stats=dict(self.stats),
        )


@dataclass(frozen=True)
class HittingSample:
    point: np.ndarray
    weight: float
    exit_time: float
    censored: bool = False


@dataclass
class HittingSamples:
    """Exit records of a continuation run, one row per walker alive at ``T``.

    Weights are stored as logarithms relative to a common shift, so only
    ratios are meaningful. ``log_den`` are the starting weights (the
    denominator of hitting functionals) and ``eta_points`` the starting
    positions. Censored rows did not reach the node before ``max_time``;
    their ``points`` hold the last position. Rows removed by Russian
    roulette carry weight zero. ``groups`` are the island labels used for
    jackknife blocks.
    """

    points: np.ndarray
    log_weights: np.ndarray
    exit_times: np.ndarray
    censored: np.ndarray
    log_den: np.ndarray
    eta_points: np.ndarray
    lam: float
    theta: np.ndarray | None = None
    max_time: float = np.inf
    stats: dict = field(default_factory=dict)
    groups: np.ndarray | None = None
    rouletted: np.ndarray | None = None

    def __post_init__(self):
        if self.rouletted is None:
            self.rouletted = np.zeros(self.points.shape[0], dtype=bool)

    @property
    def exited(self) -> np.ndarray:
        """Rows that reached the node with a nonzero weight."""
        return ~self.censored & ~self.rouletted

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def shift(self) -> float:
        return float(self.log_den.max())

    def hit_weights(self) -> np.ndarray:
        """Weights of exits, zero for censored rows, on the denominator scale."""
        w = np.exp(self.log_weights - self.shift)
        w[~self.exited] = 0.0
        return w

    def censored_weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.shift)
        w[~self.censored] = 0.0
        return w

    def den_weights(self) -> np.ndarray:
        return np.exp(self.log_den - self.shift)

    @property
    def censored_fraction(self) -> float:
        """Share of the exit weight still in flight at ``max_time``."""
        c = self.censored_weights().sum()
        tot = c + self.hit_weights().sum()
        return float(c / tot) if tot > 0 else 0.0

    @property
    def samples(self) -> list[HittingSample]:
        w = np.exp(self.log_weights - self.shift)
        return [
            HittingSample(self.points[i].copy(), float(w[i]), float(self.exit_times[i]),
                          bool(self.censored[i]))
            for i in range(len(self))
        ]


# --------------------------------------------------------------------------- kernels


def _drift(family, theta, x, psi, grad, cfg: PropagationConfig):
    b = grad / psi[:, None]
    if cfg.drift_cap:
        v2 = np.sum(b * b, axis=1)
        small = v2 * cfg.dt < 1e-12
        fac = np.ones_like(v2)
        big = ~small
        fac[big] = (np.sqrt(1.0 + 2.0 * v2[big] * cfg.dt) - 1.0) / (v2[big] * cfg.dt)
        b = b * fac[:, None]
    return b


def _node_distance(psi, grad):
    g = np.linalg.norm(grad, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(g > 0, psi / g, np.inf)
    return d


def _bridge_probability(d0, d1, dt):
    with np.errstate(over="ignore", invalid="ignore"):
        p = np.exp(-2.0 * np.maximum(d0, 0.0) * np.maximum(d1, 0.0) / dt)
    return np.where(np.isfinite(p), p, 0.0)


def _g(model, family, theta, x, cfg, mode):
    if mode == "plain":
        return model.V(x) - cfg.lam
    return local_energy_batch(model, family, theta, x) - cfg.lam


def refine_exits(family: TrialFamily, theta, x0, x1, tol_scale: float):
    """Locate node crossings on straight segments ``x0 -> x1``.

    ``psi(x0) > 0`` and ``psi(x1) <= 0`` are assumed row-wise. Bisection stops
    when ``|psi| <= tol_scale |grad psi|``; one Newton step toward the node is
    then kept if it lowers ``|psi|``.

    Returns
    -------
    points : (n, d) array
    fraction : (n,) array
        Position of the bisection point along the segment.
    converged : (n,) bool array
    """
    x0 = np.atleast_2d(x0)
    x1 = np.atleast_2d(x1)
    n = x0.shape[0]
    lo = np.zeros(n)
    hi = np.ones(n)
    frac = np.ones(n)
    pts = x1.copy()
    done = np.zeros(n, dtype=bool)
    seg = x1 - x0
    # endpoint already on the node
    psi1, g1 = family.value(theta, x1), family.grad(theta, x1)
    done |= np.abs(psi1) <= tol_scale * np.linalg.norm(g1, axis=1)
    for _ in range(MAX_BISECTIONS):
        todo = ~done
        if not todo.any():
            break
        mid = 0.5 * (lo[todo] + hi[todo])
        xm = x0[todo] + mid[:, None] * seg[todo]
        pm = family.value(theta, xm)
        gm = np.linalg.norm(family.grad(theta, xm), axis=1)
        ok = np.abs(pm) <= tol_scale * gm
        pos = pm > 0
        idx = np.flatnonzero(todo)
        lo[idx[pos]] = mid[pos]
        hi[idx[~pos]] = mid[~pos]
        frac[idx] = mid
        pts[idx] = xm
        done[idx[ok]] = True
    converged = done.copy()
    if not converged.all():
        warnings.warn(
            f"{np.count_nonzero(~converged)} exit refinements hit the bisection limit",
            BisectionWarning,
            stacklevel=2,
        )
    pts = _newton_polish(family, theta, pts, steps=1)
    return pts, frac, converged


def _newton_polish(family, theta, pts, steps: int = 1):
    for _ in range(steps):
        psi = family.value(theta, pts)
        g = family.grad(theta, pts)
        g2 = np.sum(g * g, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(g2[:, None] > 0, (psi / g2)[:, None] * g, 0.0)
        cand = pts - step
        better = np.abs(family.value(theta, cand)) < np.abs(psi)
        pts = np.where(better[:, None], cand, pts)
    return pts


def detect_and_refine_exit(prev: Walker, next: Walker, family: TrialFamily, theta,
                           config: PropagationConfig):
    """Exit point and time between two successive walker states, or ``None``.

    The exit time is interpolated linearly in the bisection fraction between
    the two clocks.
    """
    if not prev.alive:
        raise UsageError("previous state must be alive")
    theta = family.check_theta(theta)
    x0 = np.asarray(prev.position, dtype=float)[None, :]
    x1 = np.asarray(next.position, dtype=float)[None, :]
    p0 = family.value(theta, x0)[0]
    p1 = family.value(theta, x1)[0]
    g1 = np.linalg.norm(family.grad(theta, x1)[0])
    tol = config.bisection_tol * math.sqrt(config.dt)
    if np.sign(p0) == np.sign(p1) and abs(p1) > tol * g1:
        return None
    side = 1.0 if p0 > 0 else -1.0
    fam = family if side > 0 else _Flipped(family)
    pts, frac, _ = refine_exits(fam, theta, x0, x1, tol)
    t = prev.clock + frac[0] * (next.clock - prev.clock)
    return pts[0], float(t)


class _Flipped(TrialFamily):
    """The same family with its sign reversed (to treat the negative domain)."""

    def __init__(self, base):
        self.base = base
        self.dimension = base.dimension
        self.n_params = base.n_params
        self.name = base.name

    def value(self, theta, x):
        return -self.base.value(theta, x)

    def grad(self, theta, x):
        return -self.base.grad(theta, x)


def advance_walker(walker: Walker, model: Model, family: TrialFamily | None,
                   config: PropagationConfig, rng_stream: np.random.Generator,
                   theta=None, dt: float | None = None) -> Walker:
    """One Euler-Maruyama step of a single walker.

    In plain mode the trial function is only used to flag node crossings;
    in drifted mode it provides the drift and local energy, and a crossing
    step is rejected. Non-finite positions or weights mark the walker exited
    with ``flag="non-finite"``.
    """
    if not walker.alive:
        raise UsageError("walker is not alive")
    h = config.dt if dt is None else dt
    x = np.asarray(walker.position, dtype=float)[None, :]
    xi = rng_stream.standard_normal(x.shape)
    if h == 0:
        return replace(walker, position=x[0].copy())
    if family is not None:
        theta = family.check_theta(theta if theta is not None else np.zeros(family.n_params))
    sub = replace(config, dt=h)
    if config.mode == "drifted":
        if family is None:
            raise UsageError("drifted mode needs a trial family")
        psi = family.value(theta, x)
        b = _drift(family, theta, x, psi, family.grad(theta, x), sub)
        xn = x + b * h + math.sqrt(h) * xi
        if not family.value(theta, xn)[0] > 0:
            xn = x
    else:
        xn = x + math.sqrt(h) * xi
    g0 = _g(model, family, theta, x, sub, config.mode)
    g1 = _g(model, family, theta, xn, sub, config.mode)
    lw = walker.log_weight - 0.5 * h * float(g0[0] + g1[0])
    out = replace(walker, position=xn[0].copy(), log_weight=lw, clock=walker.clock + h)
    if not (np.all(np.isfinite(xn)) and np.isfinite(lw)):
        out = replace(out, status="exited", flag="non-finite")
    elif config.mode == "plain" and family is not None and not family.value(theta, xn)[0] > 0:
        res = detect_and_refine_exit(walker, out, family, theta, sub)
        if res is not None:
            out = replace(out, status="exited", exit_point=res[0], exit_time=res[1])
    return out


# --------------------------------------------------------------------------- population


def initial_positions(model: Model, family: TrialFamily, theta, config: PropagationConfig,
                      n: int, seed: int) -> np.ndarray:
    """Starting positions inside the positive domain of the trial function."""
    lo, hi = model.lower, model.upper
    d = model.dimension
    out = np.empty((0, d))
    attempt = 0
    while out.shape[0] < n:
        rng = stream(seed, Tag.INIT, 0, attempt)
        m = max(2 * (n - out.shape[0]), 1024)
        cand = lo + (hi - lo) * rng.random((m, d))
        keep = cand[family.value(theta, cand) > 0]
        out = np.concatenate([out, keep])
        attempt += 1
        if attempt > 200:
            raise UsageError("positive domain is not visible in the model box")
    x = out[:n].copy()
    if config.init == "trial":
        power = 1.0 if config.mode == "plain" else 2.0
        step = config.init_step
        psi = family.value(theta, x)
        acc = 0
        for sweep in range(config.init_sweeps):
            rng = stream(seed, Tag.INIT, 1, sweep)
            prop = x + step * rng.standard_normal(x.shape)
            u = rng.random(n)
            pp = family.value(theta, prop)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(pp > 0, (pp / psi) ** power, 0.0)
            move = u < ratio
            acc += np.count_nonzero(move)
            x[move] = prop[move]
            psi[move] = pp[move]
        log.debug("trial initializer acceptance %.3f", acc / (n * max(config.init_sweeps, 1)))
    return x


def _log_mean(lw: np.ndarray, alive: np.ndarray, n: int) -> float:
    if not alive.any():
        return -np.inf
    a = lw[alive]
    mx = a.max()
    return float(mx + np.log(np.sum(np.exp(a - mx)) / n))


def _systematic(w: np.ndarray, n: int, u: float) -> np.ndarray:
    c = np.cumsum(w)
    c /= c[-1]
    c[-1] = 1.0
    return np.searchsorted(c, (u + np.arange(n)) / n, side="right").clip(0, w.size - 1)


def resample_population(ensemble: Ensemble, rng_stream: np.random.Generator) -> Ensemble:
    """Systematic resampling of the alive walkers back to the full population size.

    The log mean weight (over all walkers, exited ones counting zero) is
    recorded in the history: appended, or added to the last entry when the
    clock has not moved. Afterwards every walker is alive with zero log weight.

    Raises
    ------
    ExtinctionError
        when no walker is alive.
    """
    if ensemble.n_alive == 0:
        raise ExtinctionError("cannot resample an extinct population")
    n = ensemble.size
    m = _log_mean(ensemble.log_weights, ensemble.alive, n)
    idx_alive = np.flatnonzero(ensemble.alive)
    w = np.exp(ensemble.log_weights[idx_alive] - ensemble.log_weights[idx_alive].max())
    pick = idx_alive[_systematic(w, n, rng_stream.random())]
    out = ensemble.copy()
    out.positions = ensemble.positions[pick].copy()
    out.log_weights = np.zeros(n)
    out.alive = np.ones(n, dtype=bool)
    if out.history and out.history[-1][0] == out.clock:
        t, v = out.history[-1]
        out.history[-1] = (t, v + m)
    else:
        out.history.append((out.clock, m))
    out.stats["resamples"] = out.stats.get("resamples", 0) + 1
    out.stats.setdefault("parents", None)
    out.stats["parents"] = pick
    return out




# --------------------------------------------------------------------------- vectorised propagation


class _Mover:
    """Vectorised step over one block of walkers."""

    def __init__(self, model, family, theta, cfg: PropagationConfig, seed: int, tag: Tag):
        self.model = model
        self.family = family
        self.theta = theta
        self.cfg = cfg
        self.seed = seed
        self.tag = tag
        self.sqdt = math.sqrt(cfg.dt)
        self.cap = 2.0 / self.sqdt if cfg.energy_cap and cfg.mode == "drifted" else None

    def evaluate(self, x):
        """Cached quantities at positions ``x``: psi, grad psi, g."""
        f, th = self.family, self.theta
        psi, grad = f.value_and_grad(th, x)
        if self.cfg.mode == "plain":
            g = self.model.V(x) - self.cfg.lam
        else:
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                g = local_energy_batch(self.model, f, th, x) - self.cfg.lam
        return psi, grad, g

    def clip(self, g, gbar):
        if self.cap is None:
            return g
        return np.clip(g, gbar - self.cap, gbar + self.cap)


def _step_block(mv: _Mover, state: dict, sl: slice, b: int, step: int):
    cfg = mv.cfg
    rng = stream(mv.seed, mv.tag, b, step)
    nb = sl.stop - sl.start
    xi = rng.standard_normal((nb, state["x"].shape[1]))
    alive = state["alive"][sl]
    if alive.all():
        ia = sl
        xi_a = xi
    elif not alive.any():
        return
    else:
        ia = np.flatnonzero(alive) + sl.start
        xi_a = xi[alive]
    x = state["x"][ia]
    psi, grad, g0 = state["psi"][ia], state["grad"][ia], state["g"][ia]
    if cfg.mode == "drifted":
        drift = _drift(mv.family, mv.theta, x, psi, grad, cfg)
        xn = x + drift * cfg.dt + mv.sqdt * xi_a
    else:
        xn = x + mv.sqdt * xi_a
    psin, gradn, g1 = mv.evaluate(xn)
    finite = np.all(np.isfinite(xn), axis=1) & np.isfinite(psin)
    crossed = ~(psin > 0)
    lw = state["lw"][ia]
    if cfg.mode == "drifted":
        rej = crossed | ~finite | np.isnan(g1)
        xn[rej], psin[rej], gradn[rej], g1[rej] = x[rej], psi[rej], grad[rej], g0[rej]
        g1 = mv.clip(g1, state["gbar"])
        lw = lw - 0.5 * cfg.dt * (g0 + g1)
        state["rejected"][b] += int(np.count_nonzero(rej))
        dead = ~np.isfinite(lw)
    else:
        finite &= np.isfinite(g1)
        lw = lw - 0.5 * cfg.dt * (g0 + g1)
        if cfg.bridge:
            p = _bridge_probability(_node_distance(psi, grad), _node_distance(psin, gradn), cfg.dt)
            with np.errstate(divide="ignore"):
                lw = lw + np.log1p(-np.minimum(p, 1.0))
        dead = crossed | ~finite | ~np.isfinite(lw)
        state["nonfinite"][b] += int(np.count_nonzero(~finite))
    state["x"][ia] = xn
    state["psi"][ia], state["grad"][ia], state["g"][ia] = psin, gradn, g1
    lw[dead] = -np.inf
    state["lw"][ia] = lw
    state["alive"][ia] &= ~dead


def island_layout(N: int, n_islands: int) -> tuple[np.ndarray, np.ndarray]:
    """Island label of every walker and the island start offsets (plus ``N``)."""
    k = max(1, min(int(n_islands), N // 2))
    edges = np.linspace(0, N, k + 1).round().astype(np.int64)
    groups = np.repeat(np.arange(k), np.diff(edges))
    return groups, edges


def _island_log_means(lw, alive, groups, edges):
    starts = edges[:-1]
    sizes = np.diff(edges)
    masked = np.where(alive, lw, -np.inf)
    mx = np.maximum.reduceat(masked, starts)
    ok = np.isfinite(mx)
    shift = np.where(ok, mx, 0.0)
    s = np.add.reduceat(np.exp(masked - shift[groups]), starts)
    with np.errstate(divide="ignore"):
        m = np.where(ok, shift + np.log(s / sizes), -np.inf)
    return m


def _island_resample(w, groups, edges, flag, u):
    """Systematic resampling inside every flagged island (vectorised)."""
    n = w.size
    starts, sizes = edges[:-1], np.diff(edges)
    tot = np.add.reduceat(w, starts)
    wn = w / np.where(tot > 0, tot, 1.0)[groups]
    cs = np.cumsum(wn)
    # island k spans (k, k + 1] of the running sum up to rounding
    base = np.cumsum(np.where(tot > 0, 1.0, 0.0)) - np.where(tot > 0, 1.0, 0.0)
    j = np.arange(n) - starts[groups]
    target = base[groups] + (u[groups] + j) / sizes[groups]
    pick = np.searchsorted(cs, target, side="right")
    lo, hi = starts[groups], edges[1:][groups] - 1
    pick = np.clip(pick, lo, hi)
    # rounding at island edges can land on a zero-weight walker
    bad = (w[pick] == 0) & flag[groups]
    if bad.any():
        for i in np.flatnonzero(bad):
            seg = np.flatnonzero(w[lo[i]:hi[i] + 1]) + lo[i]
            pick[i] = seg[np.argmin(np.abs(seg - pick[i]))]
    return np.where(flag[groups], pick, np.arange(n))


def propagate_ensemble(model: Model, family: TrialFamily, theta, config: PropagationConfig,
                       N: int, seed: int, initial: np.ndarray | None = None) -> Ensemble:
    """Propagate ``N`` walkers from time 0 to ``config.T``.

    The population is split into ``config.n_islands`` contiguous islands.
    After each step the weights of every island are divided by their mean
    over the island (exited walkers count zero) and the log of that mean is
    added to the island normalisation. An island is resampled within itself
    when its effective sample size drops below ``ess_fraction`` of its size.
    The returned log weights carry the island normalisations, so they are
    directly comparable across the whole population.

    Raises
    ------
    ExtinctionError
        when every walker has left the domain.
    """
    if N < 2:
        raise UsageError("need at least two walkers")
    theta = family.check_theta(theta)
    if initial is None:
        x = initial_positions(model, family, theta, config, N, seed)
    else:
        x = np.array(initial, dtype=float)
        if x.shape != (N, model.dimension):
            raise UsageError("initial positions have the wrong shape")
    mv = _Mover(model, family, theta, config, seed, Tag.MOVE)
    psi, grad, g = mv.evaluate(x)
    if np.any(~(psi > 0)):
        raise UsageError("initial positions must lie in the positive domain")
    groups, edges = island_layout(N, config.n_islands)
    K = edges.size - 1
    sizes = np.diff(edges)
    blocks = block_slices(N, config.block_size)
    gbar = float(np.median(g[np.isfinite(g)])) if np.isfinite(g).any() else 0.0
    g = mv.clip(np.where(np.isnan(g), gbar, g), gbar)
    state = {
        "x": x, "psi": psi, "grad": grad, "g": g, "gbar": gbar,
        "lw": np.zeros(N), "alive": np.ones(N, dtype=bool),
        "rejected": np.zeros(len(blocks), dtype=np.int64),
        "nonfinite": np.zeros(len(blocks), dtype=np.int64),
    }
    C = np.zeros(K)
    norms = np.zeros((config.n_steps + 1, K))
    history: list[tuple[float, float]] = []
    logW_prev = 0.0
    n_resample = n_clamped = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 and len(blocks) > 1 else None
    try:
        for step in range(config.n_steps):
            if pool is None:
                for b, sl in enumerate(blocks):
                    _step_block(mv, state, sl, b, step)
            else:
                list(pool.map(lambda a: _step_block(mv, state, a[1], a[0], step), enumerate(blocks)))
            t = (step + 1) * config.dt
            alive = state["alive"]
            if not alive.any():
                raise ExtinctionError(f"all walkers left the domain by t={t:.4g}")
            m = _island_log_means(state["lw"], alive, groups, edges)
            live_isl = np.isfinite(m)
            C = np.where(live_isl, C + np.where(live_isl, m, 0.0), -np.inf)
            state["lw"][alive] -= m[groups[alive]]
            low = alive & (state["lw"] < LOG_FLOOR)
            if low.any():
                n_clamped += int(np.count_nonzero(low))
                state["lw"][low] = LOG_FLOOR
            norms[step + 1] = C
            fin = np.isfinite(C)
            mx = C[fin].max()
            logW = float(mx + np.log(np.sum(sizes[fin] * np.exp(C[fin] - mx)) / N))
            history.append((t, logW - logW_prev))
            logW_prev = logW
            if mv.cap is not None:
                wa = np.exp(state["lw"][alive] + C[groups[alive]] - mx)
                state["gbar"] = float(np.dot(wa, state["g"][alive]) / wa.sum())
            if (step + 1) % config.resample_interval == 0:
                w = np.where(alive, np.exp(state["lw"]), 0.0)
                s1 = np.add.reduceat(w, edges[:-1])
                s2 = np.add.reduceat(w * w, edges[:-1])
                with np.errstate(invalid="ignore", divide="ignore"):
                    ess = np.where(s2 > 0, s1 * s1 / s2, 0.0)
                flag = live_isl & (ess < config.ess_fraction * sizes)
                if flag.any():
                    u = stream(seed, Tag.RESAMPLE, 0, step).random(K)
                    pick = _island_resample(w, groups, edges, flag, u)
                    for key in ("x", "psi", "grad", "g"):
                        state[key] = state[key][pick]
                    sel = flag[groups]
                    # resampled islands keep mean weight one
                    state["lw"] = np.where(sel, 0.0, state["lw"])
                    state["alive"] = np.where(sel, True, state["alive"])
                    n_resample += int(np.count_nonzero(flag))
    finally:
        if pool is not None:
            pool.shutdown()
    lw = state["lw"] + C[groups]
    alive = state["alive"] & np.isfinite(lw)
    lw = np.where(alive, lw, -np.inf)
    # mean weight one, so the history alone carries the normalisation
    lw = lw - logW_prev
    ens = Ensemble(
        positions=state["x"], log_weights=lw, alive=alive,
        clock=config.n_steps * config.dt, history=history, rng_seed=seed, dt=config.dt,
        theta=theta, lam=config.lam, mode=config.mode, config=config,
        stats={"resamples": n_resample, "clamped": n_clamped,
               "rejected": int(state["rejected"].sum()),
               "nonfinite": int(state["nonfinite"].sum()), "N": N, "islands": K,
               "extinct_islands": int(np.count_nonzero(~np.isfinite(C)))},
        groups=groups, island_log_norm=norms,
    )
    return ens


def _rate_from_history(ensemble: Ensemble) -> float:
    """Decay rate ``E - lam`` of the total weight over the second half of the run."""
    h = np.array([m for _, m in ensemble.history])
    if h.size == 0:
        raise UsageError("ensemble has no weight history")
    tail = h[h.size // 2:]
    return float(-tail.sum() / (tail.size * ensemble.dt))


def continue_to_exit(ensemble: Ensemble, model: Model, family: TrialFamily, theta,
                     config: PropagationConfig, max_time: float | None = None,
                     seed: int | None = None) -> HittingSamples:
    """Run the alive walkers as plain Brownian motions until they hit the node.

    No resampling takes place; each walker keeps accumulating
    ``exp(-int (V - lam))``. Walkers of a drifted ensemble are first
    reweighted by ``1 / psi`` so that the starting weights describe the
    unguided conditioned law. With ``config.bridge`` a step between two
    interior points ends on the node with the bridge crossing probability;
    the exit point is then the projection of the step midpoint onto the node.
    Walkers whose weight has decayed by ``config.roulette`` relative to their
    start play Russian roulette, which keeps every estimate unbiased.

    Exit points within twice the refinement tolerance of the fixed set of an
    odd involution in the model's group are moved onto that set.

    Without an explicit ``max_time`` the cut-off is ``20 / (E - lam)``, so the
    weight still in flight at the cut-off is of order ``exp(-20)``.
    """
    theta = family.check_theta(theta)
    seed = ensemble.rng_seed if seed is None else seed
    if max_time is None:
        max_time = config.max_time
    if max_time is None:
        rate = _rate_from_history(ensemble)
        if not rate > 0:
            raise UsageError(
                f"lam={config.lam} is not below the energy estimate; exit functionals diverge")
        max_time = 20.0 / rate
    idx = np.flatnonzero(ensemble.alive)
    if idx.size == 0:
        raise ExtinctionError("no walker alive at the start of the continuation")
    x = ensemble.positions[idx].copy()
    lw = ensemble.log_weights[idx].copy()
    if ensemble.mode == "drifted":
        lw = lw - np.log(family.value(theta, x))
    log_den = lw.copy()
    eta_points = x.copy()
    n, d = x.shape
    pcfg = replace(config, mode="plain")
    mv = _Mover(model, family, theta, pcfg, seed, Tag.CONTINUE)
    psi, grad, g = mv.evaluate(x)
    done = np.zeros(n, dtype=bool)
    censored = np.zeros(n, dtype=bool)
    rouletted = np.zeros(n, dtype=bool)
    exit_pts = x.copy()
    exit_t = np.full(n, np.nan)
    tol = config.bisection_tol * math.sqrt(config.dt)
    blocks = block_slices(n, config.block_size)
    n_steps = int(math.ceil(max_time / config.dt))
    dt = config.dt
    sq = math.sqrt(dt)
    log_thr = math.log(config.roulette) if config.roulette is not None else None
    n_unconverged = n_bridge = n_roulette = 0
    for step in range(n_steps):
        if done.all():
            break
        t0 = ensemble.clock + step * dt
        for b, sl in enumerate(blocks):
            act = ~done[sl]
            na = int(np.count_nonzero(act))
            if na == 0:
                continue
            rng = stream(seed, Tag.CONTINUE, b, step)
            xi = rng.standard_normal((na, d))
            u = rng.random(na) if config.bridge else None
            u2 = rng.random(na) if log_thr is not None else None
            ia = np.flatnonzero(act) + sl.start
            x0 = x[ia]
            x1 = x0 + sq * xi
            p1, g1v, gg1 = mv.evaluate(x1)
            crossed = ~(p1 > 0) | ~np.all(np.isfinite(x1), axis=1)
            killed = np.zeros_like(crossed)
            if config.bridge:
                pb = _bridge_probability(_node_distance(psi[ia], grad[ia]),
                                         _node_distance(p1, g1v), dt)
                killed = ~crossed & (u < pb)
            if crossed.any():
                j = ia[crossed]
                pts, frac, conv = refine_exits(family, theta, x0[crossed], x1[crossed], tol)
                n_unconverged += int(np.count_nonzero(~conv))
                pts = _snap_to_fixed_sets(model.group, pts, 2 * tol)
                ge = model.V(pts) - config.lam
                lw[j] -= 0.5 * frac * dt * (g[j] + ge)
                exit_pts[j] = pts
                exit_t[j] = t0 + frac * dt
                done[j] = True
            if killed.any():
                j = ia[killed]
                mid = 0.5 * (x0[killed] + x1[killed])
                pts = _project_to_node(family, theta, mid)
                pts = _snap_to_fixed_sets(model.group, pts, 2 * tol)
                ge = model.V(pts) - config.lam
                lw[j] -= 0.25 * dt * (g[j] + ge)
                exit_pts[j] = pts
                exit_t[j] = t0 + 0.5 * dt
                done[j] = True
                n_bridge += int(killed.sum())
            keep = ~(crossed | killed)
            j = ia[keep]
            lw[j] -= 0.5 * dt * (g[j] + gg1[keep])
            x[j], psi[j], grad[j], g[j] = x1[keep], p1[keep], g1v[keep], gg1[keep]
            if log_thr is not None:
                low = lw[j] < log_den[j] + log_thr
                if low.any():
                    jl = j[low]
                    survive = u2[keep][low] < 0.1
                    lw[jl[survive]] += math.log(10.0)
                    dead = jl[~survive]
                    rouletted[dead] = True
                    done[dead] = True
                    exit_pts[dead] = x[dead]
                    exit_t[dead] = t0 + dt
                    n_roulette += dead.size
    rest = ~done
    censored[rest] = True
    exit_pts[rest] = x[rest]
    exit_t[rest] = ensemble.clock + n_steps * dt
    groups = ensemble.groups[idx] if ensemble.groups is not None else None
    out = HittingSamples(
        points=exit_pts, log_weights=lw, exit_times=exit_t, censored=censored,
        log_den=log_den, eta_points=eta_points, lam=config.lam, theta=theta,
        max_time=max_time, groups=groups, rouletted=rouletted,
        stats={"unconverged": n_unconverged, "bridge_exits": n_bridge,
               "rouletted": n_roulette, "seed": seed},
    )
    if out.censored_fraction > 0.01:
        warnings.warn(f"{100 * out.censored_fraction:.2f}% of the exit weight did not reach "
                      "the node before max_time", RuntimeWarning, stacklevel=2)
    return out


def _snap_to_fixed_sets(group, pts, tol: float):
    """Move exit points within ``tol`` of the fixed set of an odd involution onto it.

    A skew-symmetric function vanishes identically on such a set, so the node
    there is forced by symmetry and the snapped point is exactly on it.
    """
    if group is None:
        return pts
    for op in group.odd_elements():
        M = op.matrix
        if not np.array_equal(M @ M, np.eye(M.shape[0])):
            continue
        q = 0.5 * (pts + op(pts))
        near = np.linalg.norm(q - pts, axis=1) <= tol
        if near.any():
            pts = np.where(near[:, None], q, pts)
    return pts


def _project_to_node(family, theta, pts, iters: int = 8):
    """Newton projection along the gradient onto the zero set."""
    for _ in range(iters):
        psi = family.value(theta, pts)
        g = family.grad(theta, pts)
        g2 = np.sum(g * g, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            pts = pts - np.where(g2[:, None] > 0, (psi / g2)[:, None] * g, 0.0)
    return pts
