"""Estimators for energies, the hitting measure, fixed-node gradients and error bars.

Ratio estimators share one walker population between numerator and
denominator and get their errors from a delete-block jackknife over
contiguous walker blocks. Time series (energy increments, VMC chains) use
automatic blocking.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .core import Model, NumericalError, SymmetryGroup, TrialFamily, UsageError, local_energy_batch
from .diffusion import Ensemble, HittingSamples, initial_positions, PropagationConfig
from .streams import Tag, stream

__all__ = [
    "EstimateWithError",
    "EtaSample",
    "MuEstimate",
    "StatisticalWarning",
    "blocking_error",
    "blocking_analysis",
    "jackknife",
    "estimate_eta",
    "estimate_energy_extinction",
    "estimate_energy_mixed",
    "estimate_vmc_energy",
    "estimate_mu",
    "estimate_fn_gradient_surface",
    "estimate_fn_gradient_bulk",
    "estimate_shape_derivative_dirichlet",
    "symmetry_diagnostic",
]

N_BLOCKS = 50


class StatisticalWarning(RuntimeWarning):
    """Estimate is available but its error bar deserves caution."""


@dataclass
class EstimateWithError:
    """Point estimate with standard error.

    ``value`` and ``std_error`` are scalars or matching vectors; ``covariance``
    is set for vector estimates.
    """

    value: float | np.ndarray
    std_error: float | np.ndarray
    n_effective: float
    method: str
    metadata: dict = field(default_factory=dict)
    covariance: np.ndarray | None = None

    def __post_init__(self):
        se = np.asarray(self.std_error, dtype=float)
        if np.any(se < 0) or np.any(np.isnan(se)):
            raise ValueError("std_error must be non-negative")

    @property
    def z(self):
        """``value / std_error`` with 0 where both vanish."""
        v = np.asarray(self.value, dtype=float)
        s = np.asarray(self.std_error, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(s > 0, v / np.where(s > 0, s, 1.0), np.where(v == 0, 0.0, np.inf * np.sign(v)))
        return float(z) if z.ndim == 0 else z

    def __float__(self):
        return float(self.value)


# --------------------------------------------------------------------------- error analysis


def blocking_analysis(x) -> tuple[float, int, bool]:
    """Automatic blocking (Jonsson's test) for the error of a correlated mean.

    The block size is chosen on the largest power-of-two prefix; the
    standard error is then computed on the whole series with that block size.

    Returns
    -------
    std_error, block_size, converged
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 16:
        raise UsageError("blocking needs at least 16 samples")
    if np.all(x == x[0]):
        return 0.0, 1, True
    d = int(math.floor(math.log2(n)))
    y = x[:2**d].copy()
    s = np.empty(d)
    gamma = np.empty(d)
    for i in range(d):
        m = y.size
        mu = y.mean()
        c = y - mu
        gamma[i] = np.dot(c[:-1], c[1:]) / m
        s[i] = np.dot(c, c) / m
        y = 0.5 * (y[0::2] + y[1::2])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s > 0, (gamma / s) ** 2, 0.0) * 2.0 ** np.arange(d, 0, -1)
    M = np.cumsum(terms[::-1])[::-1]
    q = chi2.ppf(0.99, np.arange(1, d + 1))
    k = d - 1
    converged = False
    for j in range(d):
        if M[j] < q[j]:
            k = j
            converged = True
            break
    # keep at least 8 blocks on the full series
    size = min(2**k, max(n // 8, 1))
    if not converged:
        k_all = range(0, int(math.floor(math.log2(max(n // 8, 1)))) + 1)
        return max(_block_se(x, 2**j) for j in k_all), size, False
    return _block_se(x, size), size, converged


def _block_se(x: np.ndarray, size: int) -> float:
    nb = x.size // size
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    if nb < 2:
        return 0.0
    return float(np.std(means, ddof=1) / math.sqrt(nb))


def blocking_error(samples, weights=None) -> float:
    """Autocorrelation-robust standard error of a (weighted) series mean.

    With weights the error is that of the ratio ``sum(w x) / sum(w)``,
    obtained from the linearised series ``w (x - mean) / mean(w)``. Emits a
    ``StatisticalWarning`` when no plateau is found; the largest block error
    is returned then.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if weights is not None:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != x.shape:
            raise UsageError("weights and samples differ in length")
        mean = np.dot(w, x) / w.sum()
        x = w * (x - mean) / w.mean()
    se, _, ok = blocking_analysis(x)
    if not ok:
        warnings.warn("blocking found no plateau; returning the largest block error",
                      StatisticalWarning, stacklevel=2)
    return se


def _block_sums(rows: np.ndarray, n_blocks: int = N_BLOCKS, groups=None) -> np.ndarray:
    """Sum ``rows`` (n, k) over contiguous blocks or group labels, giving (B, k)."""
    n = rows.shape[0]
    if groups is not None:
        labels, inv = np.unique(np.asarray(groups), return_inverse=True)
        if labels.size >= 2:
            out = np.zeros((labels.size, rows.shape[1]))
            np.add.at(out, inv.ravel(), rows)
            return out
    B = max(2, min(n_blocks, n))
    edges = np.linspace(0, n, B + 1).astype(int)
    return np.add.reduceat(rows, edges[:-1], axis=0)


def jackknife(stat: Callable[[np.ndarray], np.ndarray], rows, n_blocks: int = N_BLOCKS,
              groups=None):
    """Delete-block jackknife of a statistic of column totals.

    Parameters
    ----------
    stat : callable
        Maps the totals vector ``(k,)`` to an estimate (scalar or vector).
    rows : (n, k) array
        Per-walker contributions, in walker order.
    n_blocks : int
        Number of contiguous blocks when ``groups`` is not given.
    groups : (n,) array, optional
        Independent-group labels (resampling islands); each group is one
        block. Walkers that share ancestry must share a group.

    Returns
    -------
    value, covariance, n_blocks
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    sums = _block_sums(rows, n_blocks, groups)
    total = sums.sum(axis=0)
    value = np.atleast_1d(np.asarray(stat(total), dtype=float))
    B = sums.shape[0]
    loo = np.array([np.atleast_1d(stat(total - sums[b])) for b in range(B)])
    dev = loo - loo.mean(axis=0)
    cov = (B - 1) / B * dev.T @ dev
    return value, cov, B


def _kish(w: np.ndarray) -> float:
    s = w.sum()
    return float(s * s / np.dot(w, w)) if s > 0 else 0.0


def _e_value(E) -> tuple[float, float]:
    if isinstance(E, EstimateWithError):
        return float(E.value), float(E.std_error)
    return float(E), 0.0


def _pack(value, cov, n_eff, method, meta) -> EstimateWithError:
    value = np.asarray(value, dtype=float) + 0.0  # no negative zeros
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if value.size == 1:
        return EstimateWithError(float(value.ravel()[0]), float(se[0]), n_eff, method, meta,
                                 cov)
    return EstimateWithError(value, se, n_eff, method, meta, cov)


# --------------------------------------------------------------------------- eta and energies


@dataclass
class EtaSample:
    """Weighted configurations approximating the conditioned law at time ``T``."""

    points: np.ndarray
    weights: np.ndarray
    density: str
    lam: float = 0.0
    groups: np.ndarray | None = None

    @property
    def n_effective(self) -> float:
        return _kish(self.weights)

    def mean(self, fn: Callable[[np.ndarray], np.ndarray], n_blocks: int = N_BLOCKS) -> EstimateWithError:
        """Weighted mean of ``fn`` with a jackknife error."""
        f = np.asarray(fn(self.points), dtype=float)
        f = f.reshape(f.shape[0], -1)
        rows = np.column_stack([self.weights[:, None] * f, self.weights])
        k = f.shape[1]
        val, cov, _ = jackknife(lambda t: t[:k] / t[k], rows, n_blocks, self.groups)
        return _pack(val, cov, self.n_effective, "jackknife", {"density": self.density})


def estimate_eta(ensemble: Ensemble, unguided: bool = False,
                 family: TrialFamily | None = None) -> EtaSample:
    """Alive walkers with normalised weights.

    The walker density is proportional to the fixed-node groundstate in
    plain mode and to its product with the trial function in drifted mode.
    ``unguided=True`` divides drifted weights by the trial function (needs
    ``family``) to recover the plain-mode density.
    """
    idx = np.flatnonzero(ensemble.alive)
    if idx.size == 0:
        raise NumericalError("no alive walkers")
    if idx.size < 100:
        warnings.warn(f"only {idx.size} alive walkers", StatisticalWarning, stacklevel=2)
    x = ensemble.positions[idx]
    lw = ensemble.log_weights[idx].copy()
    density = "psi_fn" if ensemble.mode == "plain" else "psi_fn*psi_trial"
    if unguided and ensemble.mode == "drifted":
        if family is None:
            raise UsageError("unguided reweighting needs the trial family")
        lw -= np.log(family.value(ensemble.theta, x))
        density = "psi_fn"
    w = np.exp(lw - lw.max())
    groups = ensemble.groups[idx] if ensemble.groups is not None else None
    return EtaSample(x, w / w.sum(), density, ensemble.lam, groups)


def estimate_energy_extinction(ensemble: Ensemble, window_start: float | None = None) -> EstimateWithError:
    """Energy from the decay rate of the total weight.

    ``E = lam - [log W(T) - log W(t0)] / (T - t0)`` where ``W`` is the total
    weight relative to time zero and ``t0 = window_start``. When the ensemble
    carries independent resampling islands the error is a jackknife over
    islands; otherwise the per-step increments are blocked.

    Raises
    ------
    NumericalError
        with fewer than 10 steps in the window, or when the weight does not
        decay (``E - lam <= 0`` beyond three standard errors).
    """
    if window_start is None:
        cfg = ensemble.config
        window_start = cfg.window_start if cfg is not None else 0.5 * ensemble.clock
    t = np.array([h[0] for h in ensemble.history])
    m = np.array([h[1] for h in ensemble.history])
    sel = t > window_start + 1e-12 * max(1.0, abs(window_start))
    inc = m[sel]
    if inc.size < 10:
        raise NumericalError(f"only {inc.size} history records in the averaging window")
    dt = ensemble.dt
    span = inc.size * dt
    rate = -float(np.sum(inc)) / span
    norms = ensemble.island_log_norm
    meta = {"window": [float(window_start), float(ensemble.clock)], "records": int(inc.size),
            "lam": ensemble.lam, "dt": dt, "mode": ensemble.mode}
    ok = True
    if norms is not None and norms.shape[1] >= 2 and norms.shape[0] == m.size + 1:
        j0 = m.size - inc.size
        a, b = norms[j0], norms[-1]
        sizes = np.bincount(ensemble.groups, minlength=norms.shape[1]).astype(float)
        keep = np.isfinite(a)
        a, b, sizes = a[keep], b[keep], sizes[keep]
        K = a.size

        def total(x, mask):
            x = np.where(mask, x, -np.inf)
            mx = np.max(x)
            return mx + np.log(np.sum(sizes * np.exp(x - mx)))

        loo = np.empty(K)
        for k in range(K):
            mask = np.arange(K) != k
            loo[k] = -(total(b, mask) - total(a, mask)) / span
        se = math.sqrt((K - 1) / K * np.sum((loo - loo.mean()) ** 2))
        n_eff = float(K)
        meta.update(method_detail="island jackknife", islands=int(K))
        method = "extinction-rate/island-jackknife"
    else:
        if inc.size >= 16:
            se, bsize, ok = blocking_analysis(inc)
        else:
            se, bsize, ok = float(np.std(inc, ddof=1) / math.sqrt(inc.size)), 1, True
        se /= dt
        n_eff = float(min(inc.size / bsize if bsize else inc.size, inc.size))
        meta["block_size"] = int(bsize)
        method = "extinction-rate/blocking"
    if rate <= 0 and (se == 0 or rate / se < -3):
        raise NumericalError(
            f"weights do not decay (E - lam = {rate:.4g} +- {se:.2g}); lam above the energy "
            "or a misconfigured domain"
        )
    if not ok:
        warnings.warn("energy blocking found no plateau", StatisticalWarning, stacklevel=2)
    return EstimateWithError(ensemble.lam + rate, se, n_eff, method, meta)


def estimate_energy_mixed(ensemble: Ensemble, model: Model, family: TrialFamily,
                          n_blocks: int = N_BLOCKS) -> EstimateWithError:
    """Mixed energy ``<H psi> / <psi>`` under the fixed-node law.

    The trial function vanishes on the node that bounds the walkers, so
    Green's identity makes this ratio equal to the fixed-node energy with no
    boundary term. In plain mode the integrand ``H psi = V psi - lap psi / 2``
    stays bounded at the node even when the local energy does not; in
    drifted mode the walkers already carry the factor ``psi`` and the
    average of the local energy is used. The variance vanishes when the trial
    function is an eigenfunction.
    """
    idx = np.flatnonzero(ensemble.alive)
    if idx.size == 0:
        raise NumericalError("no alive walkers")
    theta = family.check_theta(ensemble.theta)
    x = ensemble.positions[idx]
    lw = ensemble.log_weights[idx]
    w = np.exp(lw - lw.max())
    groups = ensemble.groups[idx] if ensemble.groups is not None else None
    if ensemble.mode == "plain":
        psi = family.value(theta, x)
        hpsi = model.V(x) * psi - 0.5 * family.laplacian(theta, x)
        rows = np.column_stack([w * hpsi, w * psi])
    else:
        el = local_energy_batch(model, family, theta, x)
        rows = np.column_stack([w * el, w])
    val, cov, B = jackknife(lambda t: t[:1] / t[1], rows, n_blocks, groups)
    return _pack(val, cov, _kish(w), "mixed/jackknife", {"blocks": B, "mode": ensemble.mode})


def estimate_vmc_energy(model: Model, family: TrialFamily, theta, n_steps: int = 2000,
                        proposal_scale: float = 0.5, seed: int = 0, n_chains: int = 256,
                        burn_in: int | None = None) -> EstimateWithError:
    """Variational energy by random-walk Metropolis on ``psi^2`` over the whole space.

    By skew symmetry the average over the whole space equals the average
    over one nodal domain. Every chain contributes its local energy at every
    step after ``burn_in`` (default ``n_steps // 5``); the error is a blocking
    estimate over the chain-averaged series.
    """
    theta = family.check_theta(theta)
    if n_steps < 20:
        raise UsageError("n_steps must be at least 20")
    burn = n_steps // 5 if burn_in is None else burn_in
    cfg = PropagationConfig(dt=1.0, T=0.0)
    x = initial_positions(model, family, theta, cfg, n_chains, seed)
    rng0 = stream(seed, Tag.VMC, 1, 0)
    flip = rng0.random(n_chains) < 0.5
    odd = model.group.odd_elements()
    if odd:
        x[flip] = odd[0](x[flip])
    psi = family.value(theta, x)
    series = []
    values = []
    acc = 0
    for step in range(n_steps):
        rng = stream(seed, Tag.VMC, 0, step)
        prop = x + proposal_scale * rng.standard_normal(x.shape)
        u = rng.random(n_chains)
        pp = family.value(theta, prop)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratio = (pp / psi) ** 2
        move = (u < ratio) & (pp != 0)
        x[move] = prop[move]
        psi[move] = pp[move]
        if step >= burn:
            acc += int(np.count_nonzero(move))
            el = local_energy_batch(model, family, theta, x)
            values.append(el)
            series.append(el.mean())
    rate = acc / (n_chains * max(n_steps - burn, 1))
    if not 0.1 <= rate <= 0.9:
        suggestion = proposal_scale * (0.5 if rate < 0.1 else 2.0)
        warnings.warn(f"Metropolis acceptance {rate:.2f}; try proposal_scale={suggestion:.3g}",
                      StatisticalWarning, stacklevel=2)
    vals = np.concatenate(values)
    series = np.asarray(series)
    mean = float(np.mean(vals))
    se = blocking_analysis(series)[0] if series.size >= 16 else float(
        np.std(series, ddof=1) / math.sqrt(series.size))
    var = float(np.var(vals))
    n_eff = float(vals.size) if se == 0 else min(float(vals.size), var / se**2)
    return EstimateWithError(
        mean, se, n_eff, "vmc/blocking",
        {"acceptance": rate, "sample_variance": var, "n_chains": n_chains, "n_steps": n_steps},
    )


# --------------------------------------------------------------------------- hitting measure


@dataclass
class MuEstimate:
    """Hitting-measure atoms normalised by the shared denominator."""

    points: np.ndarray
    weights: np.ndarray
    mass: EstimateWithError
    functionals: dict[str, EstimateWithError]
    censored_fraction: float
    censored_mass: float

    def integrate(self, fn) -> float:
        return float(np.dot(self.weights, np.asarray(fn(self.points), dtype=float)))


def estimate_mu(hitting_samples: HittingSamples, denominator_weights=None,
                functionals: Mapping[str, Callable] | None = None,
                n_blocks: int = N_BLOCKS) -> MuEstimate:
    """Functionals of the hitting measure.

    ``int phi dmu = sum_i w_i phi(x_i) / sum_j d_j``, ``w_i`` the exit weights
    and ``d_j`` the weights of walkers alive at ``T`` (by default those
    stored in ``hitting_samples``).
    """
    hs = hitting_samples
    w = hs.hit_weights()
    den = hs.den_weights() if denominator_weights is None else np.asarray(denominator_weights, float)
    if den.shape != w.shape:
        raise UsageError("denominator weights must align with the hitting samples")
    D = den.sum()
    if not D > 0:
        raise NumericalError("denominator weights vanish")
    cf = hs.censored_fraction
    if cf > 0.01:
        warnings.warn(f"censored fraction {cf:.3%} exceeds 1%", StatisticalWarning, stacklevel=2)
    funcs = {"mass": lambda x: np.ones(x.shape[0])}
    funcs.update(functionals or {})
    out = {}
    n_eff = _kish(w)
    for name, fn in funcs.items():
        f = np.asarray(fn(hs.points), dtype=float)
        f = np.where(hs.exited, f, 0.0)
        rows = np.column_stack([w * f, den])
        val, cov, _ = jackknife(lambda t: t[0] / t[1], rows, n_blocks, hs.groups)
        out[name] = _pack(val, cov, n_eff, "jackknife", {"lam": hs.lam})
    return MuEstimate(
        hs.points, w / D, out.pop("mass"), out, cf, float(hs.censored_weights().sum() / D)
    )


def _eta_from(hits: HittingSamples, eta_samples):
    if eta_samples is None:
        return hits.eta_points, hits.den_weights(), hits.groups
    if isinstance(eta_samples, EtaSample):
        return eta_samples.points, eta_samples.weights, eta_samples.groups
    pts, w = eta_samples
    return np.asarray(pts, float), np.asarray(w, float), None


def estimate_fn_gradient_surface(mu_samples: HittingSamples, eta_samples, family: TrialFamily,
                                 theta, E_fn, lam: float | None = None,
                                 n_blocks: int = N_BLOCKS) -> EstimateWithError:
    """Fixed-node energy gradient from the hitting measure.

    ``grad E = -2 (E - lam) sum_i w_i d_theta psi(x_i) / sum_j d_j psi(y_j)``
    with exit points ``x_i`` and starting points ``y_j``. Numerator and
    denominator must come from the same walkers (pass ``eta_samples=None``).
    The error of ``E_fn`` enters linearly.

    Raises
    ------
    NumericalError
        if the denominator is statistically compatible with zero.
    """
    hs = mu_samples
    lam = hs.lam if lam is None else lam
    theta = family.check_theta(theta)
    E, sE = _e_value(E_fn)
    if not E > lam:
        raise UsageError("need lam < E_fn")
    pts, den, groups = _eta_from(hs, eta_samples)
    if den.shape[0] != len(hs):
        raise UsageError("eta samples must share the walkers of the hitting samples")
    w = hs.hit_weights()
    ok = hs.exited
    dpsi = np.zeros((len(hs), family.n_params))
    dpsi[ok] = family.theta_grad(theta, hs.points[ok])
    psi_eta = family.value(theta, pts)
    p = family.n_params
    rows = np.column_stack([w[:, None] * dpsi, den * psi_eta])
    _check_denominator(rows[:, p], n_blocks, hs.groups)
    c = -2.0 * (E - lam)
    val, cov, B = jackknife(lambda t: c * t[:p] / t[p], rows, n_blocks, hs.groups)
    dE = val / (E - lam)
    cov = cov + np.outer(dE, dE) * sE**2
    # same integrand written with the node velocity r = d_theta psi / |grad psi|
    vel = np.zeros_like(dpsi)
    if ok.any():
        gn = np.linalg.norm(family.grad(theta, hs.points[ok]), axis=1)
        vel[ok] = dpsi[ok] / gn[:, None]
    meta = {
        "E": E, "E_stderr": sE, "lam": lam, "blocks": B,
        "mean_node_velocity": (np.dot(w, vel) / max(w.sum(), 1e-300)).tolist(),
        "censored_fraction": hs.censored_fraction,
    }
    return _pack(val, cov, _kish(w), "surface/jackknife", meta)


def _check_denominator(col: np.ndarray, n_blocks: int, groups=None):
    val, cov, _ = jackknife(lambda t: t[:1], col[:, None], n_blocks, groups)
    se = math.sqrt(max(cov[0, 0], 0.0))
    if se > 0 and abs(val[0]) / se < 2:
        raise NumericalError("trial-function normalisation is compatible with zero")


def estimate_fn_gradient_bulk(eta_samples, family: TrialFamily, theta, E_fn,
                              model: Model | None = None,
                              n_blocks: int = N_BLOCKS) -> EstimateWithError:
    """Fixed-node energy gradient from a volume average.

    ``grad E = 2 <(H - E) d_theta psi> / <psi>`` under the conditioned law,
    with ``(H - E) f = -lap f / 2 + (V - E) f``. The factor 2 makes it agree
    with the surface form: both sides follow from Green's identity applied to
    the fixed-node groundstate.

    ``eta_samples`` may be an ``EtaSample``, a ``HittingSamples`` (its
    starting points are used) or a ``(points, weights)`` pair.
    """
    if model is None:
        raise UsageError("the bulk form needs the model potential")
    theta = family.check_theta(theta)
    E, sE = _e_value(E_fn)
    if eta_samples is None:
        raise UsageError("eta samples required")
    if isinstance(eta_samples, HittingSamples):
        pts, w, groups = eta_samples.eta_points, eta_samples.den_weights(), eta_samples.groups
    else:
        pts, w, groups = _eta_from(None, eta_samples)
    if isinstance(eta_samples, EtaSample) and eta_samples.density != "psi_fn":
        raise UsageError("bulk form needs the unguided density (estimate_eta(unguided=True))")
    f = family.theta_grad(theta, pts)
    lf = family.laplacian_theta_grad(theta, pts)
    V = model.V(pts)
    psi = family.value(theta, pts)
    p = family.n_params
    hf = -0.5 * lf + (V - E)[:, None] * f
    rows = np.column_stack([w[:, None] * hf, w * psi, w[:, None] * f])
    _check_denominator(rows[:, p], n_blocks, groups)
    val, cov, B = jackknife(lambda t: 2.0 * t[:p] / t[p], rows, n_blocks, groups)
    dE = -2.0 * rows[:, p + 1:].sum(axis=0) / rows[:, p].sum()
    cov = cov + np.outer(dE, dE) * sE**2
    return _pack(val, cov, _kish(w), "bulk/jackknife", {"E": E, "E_stderr": sE, "blocks": B})


def estimate_shape_derivative_dirichlet(model: Model, psi_approx, r_field, mu_samples: HittingSamples,
                                        eta_samples, E, lam: float | None = None,
                                        normal: Callable | None = None,
                                        family: TrialFamily | None = None,
                                        n_blocks: int = N_BLOCKS) -> EstimateWithError:
    """Derivative of a Dirichlet groundstate energy under a boundary motion.

    ``dE = (E - lam) sum_i w_i r(x_i) grad phi(x_i).n(x_i) / sum_j d_j phi(y_j)``
    for any smooth ``phi`` positive inside the domain.

    Parameters
    ----------
    psi_approx : callable
        ``x -> (values, gradients)`` of ``phi``.
    r_field : callable
        Normal boundary velocity ``x -> (n,)`` or ``(n, p)``.
    normal : callable, optional
        Outward unit normal ``x -> (n, d)``. Defaults to
        ``-grad psi / |grad psi|`` of ``family`` at the parameter stored in
        ``mu_samples``.
    """
    hs = mu_samples
    lam = hs.lam if lam is None else lam
    Ev, sE = _e_value(E)
    if normal is None:
        if family is None:
            raise UsageError("need a normal field or the trial family")
        th = hs.theta

        def normal(x):
            g = family.grad(th, x)
            return -g / np.linalg.norm(g, axis=1, keepdims=True)

    pts, den, _ = _eta_from(hs, eta_samples)
    w = hs.hit_weights()
    ok = hs.exited
    r = np.asarray(r_field(hs.points), dtype=float)
    r = r.reshape(r.shape[0], -1)
    _, g_exit = psi_approx(hs.points)
    dn = np.sum(g_exit * normal(hs.points), axis=1)
    integrand = np.where(ok[:, None], r * dn[:, None], 0.0)
    phi_eta, _ = psi_approx(pts)
    p = r.shape[1]
    rows = np.column_stack([w[:, None] * integrand, den * phi_eta])
    _check_denominator(rows[:, p], n_blocks, hs.groups)
    c = Ev - lam
    val, cov, _ = jackknife(lambda t: c * t[:p] / t[p], rows, n_blocks, hs.groups)
    if c != 0:
        dE = val / c
        cov = cov + np.outer(dE, dE) * sE**2
    return _pack(val, cov, _kish(w), "shape/jackknife", {"E": Ev, "E_stderr": sE, "lam": lam})


# --------------------------------------------------------------------------- symmetry


def symmetry_diagnostic(mu_samples: HittingSamples, group: SymmetryGroup,
                        test_functions: Mapping[str, Callable] | Sequence[tuple[str, Callable]],
                        atol: float = 1e-9, n_blocks: int = N_BLOCKS,
                        full: bool = False):
    """z-scores of skew-symmetric test functions against the hitting measure.

    A measure invariant under the group integrates every skew-symmetric
    function to zero, so large ``|z|`` signals symmetry breaking. Values with
    ``|g| < atol`` are treated as zero (a skew function vanishes on a
    symmetry-forced node up to the exit tolerance); a test function that is
    identically zero gets ``z = 0``.

    Returns
    -------
    list of ``(name, z)``, or of dicts with value and error when ``full``.
    """
    hs = mu_samples
    items = list(test_functions.items()) if isinstance(test_functions, Mapping) else list(test_functions)
    w = hs.hit_weights()
    den = hs.den_weights()
    ok = hs.exited
    pts = hs.points[ok]
    n_eff = _kish(w)
    if n_eff < 500:
        warnings.warn(f"only {n_eff:.0f} effective exit samples; diagnostic underpowered",
                      StatisticalWarning, stacklevel=2)
    out = []
    for name, fn in items:
        g = np.zeros(len(hs))
        if pts.shape[0]:
            gv = np.asarray(fn(pts), dtype=float)
            scale = 1.0 + np.abs(gv)
            for op in group.odd_elements():
                res = np.abs(np.asarray(fn(op(pts)), float) + gv) / scale
                if np.max(res) > 1e-8:
                    raise UsageError(f"test function {name!r} is not skew-symmetric")
            for op in group.elements:
                if op.parity == 1:
                    res = np.abs(np.asarray(fn(op(pts)), float) - gv) / scale
                    if np.max(res) > 1e-8:
                        raise UsageError(f"test function {name!r} is not skew-symmetric")
            gv = np.where(np.abs(gv) < atol, 0.0, gv)
            g[ok] = gv
        rows = np.column_stack([w * g, den])
        val, cov, _ = jackknife(lambda t: t[:1] / t[1], rows, n_blocks, hs.groups)
        se = math.sqrt(max(cov[0, 0], 0.0))
        if se > 0:
            z = float(val[0] / se)
        else:
            z = 0.0 if val[0] == 0 else math.copysign(math.inf, val[0])
        if full:
            out.append({"name": name, "z": z, "value": float(val[0]), "stderr": se,
                        "n_eff": n_eff})
        else:
            out.append((name, z))
    return out
