"""End-to-end runs built from the propagation and estimator primitives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, UsageError
from .diffusion import (
    Ensemble,
    HittingSamples,
    PropagationConfig,
    continue_to_exit,
    propagate_ensemble,
)
from .estimators import (
    EstimateWithError,
    MuEstimate,
    estimate_energy_extinction,
    estimate_energy_mixed,
    estimate_eta,
    estimate_fn_gradient_bulk,
    estimate_fn_gradient_surface,
    estimate_mu,
    estimate_shape_derivative_dirichlet,
)
from .models import ModelCatalogEntry

log = logging.getLogger(__name__)

__all__ = [
    "DMCRun",
    "MuRun",
    "GradientRun",
    "OptimizeStep",
    "OptimizeResult",
    "run_dmc",
    "run_mu",
    "run_gradient",
    "run_shape",
    "check_lambda",
    "nmc_optimize",
]


@dataclass
class DMCRun:
    """Propagated ensemble with its extinction-rate and mixed energies."""

    ensemble: Ensemble
    energy: EstimateWithError
    mixed: EstimateWithError | None = None

    @property
    def eta(self):
        return estimate_eta(self.ensemble)


@dataclass
class MuRun(DMCRun):
    hits: HittingSamples = None
    mu: MuEstimate = None


@dataclass
class GradientRun:
    """Gradient forms from one run; ``energy`` is the estimate used in them."""

    energy: EstimateWithError
    surface: EstimateWithError | None
    bulk: EstimateWithError | None
    hits: HittingSamples
    extinction: EstimateWithError | None = None

    def consistency_z(self) -> np.ndarray | None:
        """Componentwise ``(surface - bulk) / combined sigma``."""
        if self.surface is None or self.bulk is None:
            return None
        diff = np.atleast_1d(self.surface.value) - np.atleast_1d(self.bulk.value)
        se = np.hypot(np.atleast_1d(self.surface.std_error), np.atleast_1d(self.bulk.std_error))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))


def check_lambda(energy: EstimateWithError, lam: float, n_sigma: float = 3.0):
    """Raise unless ``lam`` lies below the energy by ``n_sigma`` standard errors."""
    if not lam < energy.value - n_sigma * energy.std_error:
        raise NumericalError(
            f"lam={lam:g} is not admissible: energy {energy.value:.5g} +- {energy.std_error:.2g}"
        )


def run_dmc(entry: ModelCatalogEntry, theta, config: PropagationConfig, N: int,
            seed: int) -> DMCRun:
    ens = propagate_ensemble(entry.model, entry.family, theta, config, N, seed)
    mixed = estimate_energy_mixed(ens, entry.model, entry.family)
    return DMCRun(ens, estimate_energy_extinction(ens), mixed)


def run_mu(entry: ModelCatalogEntry, theta, config: PropagationConfig, N: int, seed: int,
           functionals=None, dmc: DMCRun | None = None) -> MuRun:
    """Propagate, continue to the node and integrate ``functionals`` against mu."""
    dmc = dmc or run_dmc(entry, theta, config, N, seed)
    check_lambda(dmc.energy, config.lam)
    hits = continue_to_exit(dmc.ensemble, entry.model, entry.family, theta, config)
    mu = estimate_mu(hits, functionals=functionals)
    return MuRun(dmc.ensemble, dmc.energy, dmc.mixed, hits, mu)


def run_gradient(entry: ModelCatalogEntry, theta, config: PropagationConfig, N: int,
                 seed: int, forms=("surface", "bulk")) -> GradientRun:
    """Fixed-node energy gradient in the requested forms from one run.

    The energy entering both forms is the mixed estimate, which is far less
    noisy than the extinction rate; ``lam`` is checked against the latter.
    """
    forms = set(forms)
    if not forms <= {"surface", "bulk"} or not forms:
        raise UsageError("forms must be a non-empty subset of {'surface', 'bulk'}")
    theta = entry.family.check_theta(theta)
    dmc = run_dmc(entry, theta, config, N, seed)
    check_lambda(dmc.energy, config.lam)
    hits = continue_to_exit(dmc.ensemble, entry.model, entry.family, theta, config)
    E = dmc.mixed
    surf = bulk = None
    if "surface" in forms:
        surf = estimate_fn_gradient_surface(hits, None, entry.family, theta, E)
    if "bulk" in forms:
        bulk = estimate_fn_gradient_bulk(hits, entry.family, theta, E, model=entry.model)
    return GradientRun(E, surf, bulk, hits, dmc.energy)


def run_shape(entry: ModelCatalogEntry, config: PropagationConfig, N: int, seed: int,
              velocity: str = "right") -> tuple[EstimateWithError, MuRun]:
    """Energy derivative of a box-shaped domain under a face motion.

    ``velocity="right"`` moves the upper face of the first axis outward at
    unit speed; ``"symmetric"`` moves both faces of that axis outward. The
    trial function doubles as the test function ``phi``.
    """
    theta = entry.theta0
    fam = entry.family
    if not hasattr(fam, "domain"):
        raise UsageError("shape derivatives need a box-shaped domain")
    lo, hi = fam.domain(theta)
    mid = 0.5 * (lo[0] + hi[0])
    if velocity == "right":
        def r(x):
            return (x[:, 0] > mid).astype(float)
    elif velocity == "symmetric":
        def r(x):
            return np.ones(x.shape[0])
    else:
        raise UsageError(f"unknown velocity field {velocity!r}")
    mr = run_mu(entry, theta, config, N, seed)

    def phi(x):
        return fam.value_and_grad(theta, x)

    est = estimate_shape_derivative_dirichlet(
        entry.model, phi, r, mr.hits, None, mr.mixed or mr.energy, family=fam
    )
    return est, mr


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizeStep:
    iteration: int
    theta: np.ndarray
    energy: float
    energy_stderr: float
    gradient: np.ndarray
    gradient_cov: np.ndarray
    gamma: float
    accepted: bool
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "theta": self.theta.tolist(),
            "energy": self.energy,
            "energy_stderr": self.energy_stderr,
            "gradient": self.gradient.tolist(),
            "gradient_cov": self.gradient_cov.tolist(),
            "gamma": self.gamma,
            "accepted": self.accepted,
            "note": self.note,
        }


@dataclass
class OptimizeResult:
    theta: np.ndarray
    energy: EstimateWithError
    trace: list[OptimizeStep] = field(default_factory=list)

    @property
    def accepted(self) -> list[OptimizeStep]:
        return [s for s in self.trace if s.accepted]

    def monotone_within(self, n_sigma: float = 2.0) -> bool:
        """Accepted energies never rise by more than ``n_sigma`` combined errors."""
        acc = self.accepted
        for a, b in zip(acc, acc[1:]):
            if b.energy - a.energy > n_sigma * math.hypot(a.energy_stderr, b.energy_stderr):
                return False
        return True


def nmc_optimize(entry: ModelCatalogEntry, theta0, config: PropagationConfig, N: int,
                 seed: int, gamma: float = 0.5, iterations: int = 15,
                 form: str = "surface", n_sigma: float = 2.0,
                 min_gamma: float = 1e-3) -> OptimizeResult:
    """Nodal Monte-Carlo descent of the fixed-node energy.

    Each iteration samples the conditioned law at the current parameter,
    continues the walkers to the node, estimates the gradient and steps
    ``theta <- theta - gamma * grad``. A trial point whose energy exceeds the
    last accepted one by more than ``n_sigma`` combined standard errors, or
    where ``lam`` is not admissible, is rejected: the step size halves and
    the step is retaken from the last accepted point. ``iterations`` counts
    gradient evaluations, rejected ones included.
    """
    if form not in ("surface", "bulk"):
        raise UsageError("form must be 'surface' or 'bulk'")
    theta = entry.family.check_theta(theta0).copy()
    trace: list[OptimizeStep] = []
    last: OptimizeStep | None = None
    last_energy: EstimateWithError | None = None
    for k in range(iterations):
        it_seed = int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0] >> 1)
        note = ""
        try:
            g = run_gradient(entry, theta, config, N, it_seed, forms=(form,))
        except NumericalError as exc:
            g, note = None, f"rejected: {exc}"
        if g is not None:
            est = g.surface if form == "surface" else g.bulk
            E = g.energy
            rise = 0.0 if last is None else E.value - last.energy
            tol = 0.0 if last is None else n_sigma * math.hypot(E.std_error, last.energy_stderr)
            if last is not None and rise > tol:
                note = f"rejected: energy rose by {rise:.3g} > {tol:.3g}"
            step = OptimizeStep(k, theta.copy(), float(E.value), float(E.std_error),
                                np.atleast_1d(est.value).copy(), np.atleast_2d(est.covariance),
                                gamma, not note, note)
        else:
            step = OptimizeStep(k, theta.copy(), math.nan, math.nan,
                                np.full(theta.size, np.nan), np.full((theta.size,) * 2, np.nan),
                                gamma, False, note)
        trace.append(step)
        log.info("iteration %d theta=%s E=%.5f accepted=%s", k, theta, step.energy, step.accepted)
        if step.accepted:
            last, last_energy = step, g.energy
        else:
            if last is None:
                raise NumericalError(f"the starting point is not usable: {note}")
            gamma *= 0.5
            if gamma < min_gamma:
                break
        theta = last.theta - gamma * last.gradient
    return OptimizeResult(last.theta.copy(), last_energy, trace)
