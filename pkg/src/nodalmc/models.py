"""Built-in models and trial families.

Every family ships closed-form value, gradient, Laplacian, parameter
gradient and Laplacian of the parameter gradient. Most families have the
form ``psi = P(x) exp(-x^T A x / 2)`` with a polynomial prefactor ``P``,
for which

    grad psi = G (grad P - P A x)
    lap  psi = G (lap P - 2 (A x).grad P + P (|A x|^2 - tr A))
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.polynomial import hermite as H

from .core import (
    Model,
    SymmetryGroup,
    SymmetryOperation,
    TrialFamily,
    UsageError,
    halton_points,
    verify_skew_symmetry,
)

__all__ = [
    "ModelCatalogEntry",
    "BoxSineFamily",
    "GaussianHarmonicFamily",
    "GaussianPolynomialFamily",
    "TwoFermionFamily",
    "OddWellFamily",
    "HermiteSlaterFamily",
    "CATALOG",
    "make_model",
    "evaluate_trial",
    "list_models",
]

TestFunction = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------- families


class BoxSineFamily(TrialFamily):
    """Product of sines vanishing on the faces of a box.

    ``psi = prod_i sin(pi (x_i - lo_i) / L_i)``. The single parameter moves
    the upper face of axis 0, so the domain is ``(lo_0, hi_0 + theta)`` along
    that axis. For V = 0 this is the exact Dirichlet groundstate.
    """

    n_params = 1

    def __init__(self, lower, upper, name: str = "box_sine"):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.dimension = self.lower.size
        self.name = name

    def lengths(self, theta) -> np.ndarray:
        th = self.check_theta(theta)
        L = self.upper - self.lower
        L = L.copy()
        L[0] += th[0]
        if L[0] <= 0:
            raise UsageError("box length must stay positive")
        return L

    def domain(self, theta) -> tuple[np.ndarray, np.ndarray]:
        L = self.lengths(theta)
        return self.lower.copy(), self.lower + L

    def _parts(self, theta, x):
        L = self.lengths(theta)
        k = np.pi / L
        u = k * (x - self.lower)
        return L, k, np.sin(u), np.cos(u)

    def value(self, theta, x):
        _, _, s, _ = self._parts(theta, x)
        return np.prod(s, axis=1)

    def grad(self, theta, x):
        _, k, s, c = self._parts(theta, x)
        return self._grad(k, s, c)

    def value_and_grad(self, theta, x):
        _, k, s, c = self._parts(theta, x)
        if self.dimension == 1:
            return s[:, 0], k[0] * c
        return np.prod(s, axis=1), self._grad(k, s, c)

    def _grad(self, k, s, c):
        out = np.empty_like(s)
        for i in range(self.dimension):
            others = np.prod(np.delete(s, i, axis=1), axis=1)
            out[:, i] = k[i] * c[:, i] * others
        return out

    def laplacian(self, theta, x):
        _, k, s, _ = self._parts(theta, x)
        return -np.sum(k**2) * np.prod(s, axis=1)

    def local_energy(self, theta, x, v):
        k = np.pi / self.lengths(theta)
        return v + 0.5 * np.sum(k**2)

    def theta_grad(self, theta, x):
        L, k, s, c = self._parts(theta, x)
        others = np.prod(s[:, 1:], axis=1)
        du = -np.pi * (x[:, 0] - self.lower[0]) / L[0] ** 2
        return (c[:, 0] * du * others)[:, None]

    def laplacian_theta_grad(self, theta, x):
        # f = cos(u) du others with u = k0 (x0 - lo0), du = -u / L0
        L, k, s, c = self._parts(theta, x)
        u = k[0] * (x[:, 0] - self.lower[0])
        others = np.prod(s[:, 1:], axis=1)
        # d2/dx0^2 [-(u/L0) cos u] = (k0^2 / L0) (2 sin u + u cos u)
        d2 = (k[0] ** 2 / L[0]) * (2.0 * s[:, 0] + u * c[:, 0]) * others
        rest = -np.sum(k[1:] ** 2) * (-(u / L[0]) * c[:, 0]) * others
        return (d2 + rest)[:, None]


class GaussianHarmonicFamily(TrialFamily):
    """``psi = exp(-(1 + theta) x^2 / 2)`` in one dimension; no node."""

    dimension = 1
    n_params = 1
    name = "gaussian"

    def _a(self, theta):
        return 1.0 + self.check_theta(theta)[0]

    def value(self, theta, x):
        return np.exp(-0.5 * self._a(theta) * x[:, 0] ** 2)

    def grad(self, theta, x):
        a = self._a(theta)
        return (-a * x[:, 0] * self.value(theta, x))[:, None]

    def laplacian(self, theta, x):
        a = self._a(theta)
        return (a * a * x[:, 0] ** 2 - a) * self.value(theta, x)

    def local_energy(self, theta, x, v):
        a = self._a(theta)
        return (v - 0.5 * (a * x[:, 0]) ** 2) + 0.5 * a

    def theta_grad(self, theta, x):
        return (-0.5 * x[:, 0] ** 2 * self.value(theta, x))[:, None]

    def laplacian_theta_grad(self, theta, x):
        # f = -x^2/2 g, g'' = (a^2 x^2 - a) g, g' = -a x g
        a = self._a(theta)
        x0 = x[:, 0]
        g = self.value(theta, x)
        lap = -0.5 * (2.0 * g + 4.0 * x0 * (-a * x0 * g) + x0**2 * (a * a * x0**2 - a) * g)
        return lap[:, None]


class GaussianPolynomialFamily(TrialFamily):
    """Base for ``psi = P(x) exp(-x^T A x / 2)`` with fixed symmetric ``A``.

    Subclasses provide ``poly`` returning ``(P, grad P, lap P)`` and
    ``theta_poly`` returning the same triple for each ``dP/dtheta_k`` with
    shapes ``(n, p)``, ``(n, p, d)``, ``(n, p)``.
    """

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = np.diag(A)
        self.A = A
        self.dimension = A.shape[0]
        self._diag = np.allclose(A, np.diag(np.diag(A)), atol=0.0)
        self._trA = float(np.trace(A))

    def poly(self, theta, x):
        raise NotImplementedError

    def theta_poly(self, theta, x):
        raise NotImplementedError

    def _ax(self, x):
        return x * np.diag(self.A) if self._diag else x @ self.A.T

    def gaussian(self, x):
        return np.exp(-0.5 * np.sum(x * self._ax(x), axis=1))

    def value(self, theta, x):
        P, _, _ = self.poly(self.check_theta(theta), x)
        return P * self.gaussian(x)

    def grad(self, theta, x):
        P, gP, _ = self.poly(self.check_theta(theta), x)
        return self.gaussian(x)[:, None] * (gP - P[:, None] * self._ax(x))

    def value_and_grad(self, theta, x):
        P, gP, _ = self.poly(self.check_theta(theta), x)
        G = self.gaussian(x)
        return P * G, G[:, None] * (gP - P[:, None] * self._ax(x))

    def _lap(self, P, gP, lP, ax, q):
        return lP - 2.0 * np.sum(ax * gP, axis=-1) + P * (q - self._trA)

    def laplacian(self, theta, x):
        P, gP, lP = self.poly(self.check_theta(theta), x)
        ax = self._ax(x)
        q = np.sum(ax * ax, axis=1)
        return self.gaussian(x) * self._lap(P, gP, lP, ax, q)

    def local_energy(self, theta, x, v):
        # ordered so that v - |Ax|^2/2 cancels exactly for matched oscillators
        P, gP, lP = self.poly(self.check_theta(theta), x)
        ax = self._ax(x)
        q = np.sum(ax * ax, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (v - 0.5 * q) + 0.5 * self._trA + np.sum(ax * gP, axis=1) / P - 0.5 * lP / P

    def theta_grad(self, theta, x):
        Q, _, _ = self.theta_poly(self.check_theta(theta), x)
        return Q * self.gaussian(x)[:, None]

    def laplacian_theta_grad(self, theta, x):
        Q, gQ, lQ = self.theta_poly(self.check_theta(theta), x)
        ax = self._ax(x)
        q = np.sum(ax * ax, axis=1)
        inner = lQ - 2.0 * np.einsum("nd,npd->np", ax, gQ) + Q * (q - self._trA)[:, None]
        return self.gaussian(x)[:, None] * inner


class TwoFermionFamily(GaussianPolynomialFamily):
    """``psi = (x1 - x2)(1 + theta (x1 + x2)) exp(-|x|^2 / 2)``."""

    n_params = 1
    name = "two_fermion"

    def __init__(self):
        super().__init__(np.ones(2))

    def poly(self, theta, x):
        t = theta[0]
        x1, x2 = x[:, 0], x[:, 1]
        dif = x1 - x2
        f = 1.0 + t * (x1 + x2)
        P = dif * f
        g = np.stack([f + t * dif, -f + t * dif], axis=1)
        return P, g, np.zeros_like(P)

    def theta_poly(self, theta, x):
        x1, x2 = x[:, 0], x[:, 1]
        Q = (x1 * x1 - x2 * x2)[:, None]
        gQ = np.stack([2.0 * x1, -2.0 * x2], axis=1)[:, None, :]
        return Q, gQ, np.zeros_like(Q)


class OddWellFamily(GaussianPolynomialFamily):
    """``psi = (x + t1 y + t2 z) exp(-(x^2 + 2 y^2 + 3 z^2) / 2)``; node is a tilted plane."""

    n_params = 2
    name = "odd_well"

    def __init__(self, omega=(1.0, 2.0, 3.0)):
        super().__init__(np.asarray(omega, dtype=float))

    def poly(self, theta, x):
        normal = np.array([1.0, theta[0], theta[1]])
        P = x @ normal
        return P, np.broadcast_to(normal, x.shape), np.zeros(x.shape[0])

    def theta_poly(self, theta, x):
        n = x.shape[0]
        Q = x[:, 1:3].copy()
        gQ = np.zeros((n, 2, 3))
        gQ[:, 0, 1] = 1.0
        gQ[:, 1, 2] = 1.0
        return Q, gQ, np.zeros((n, 2))


class HermiteSlaterFamily(GaussianPolynomialFamily):
    """Slater determinant of the lowest 1D oscillator orbitals times a Gaussian pair Jastrow.

    Orbitals are ``H_k(x) exp(-x^2/2)`` for ``k < n``, except the last one,
    which is ``H_{n-1} + theta H_n``. The Jastrow factor
    ``exp(-alpha sum_{i<j} (x_i - x_j)^2)`` is folded into ``A``.
    """

    n_params = 1
    name = "hermite_slater"

    def __init__(self, n: int = 3, alpha: float = 0.0):
        if n < 2:
            raise UsageError("need at least two particles")
        self.n = n
        self.alpha = float(alpha)
        A = np.eye(n) + 2.0 * self.alpha * (n * np.eye(n) - np.ones((n, n)))
        super().__init__(A)
        eye = np.eye(n + 1)
        self._c = [eye[k] for k in range(n + 1)]
        self._d1 = [H.hermder(c) for c in self._c]
        self._d2 = [H.hermder(c, 2) for c in self._c]

    def _tables(self, x, theta, last: int | None):
        """Rows ``h_j(x_i)`` and derivatives; column ``n-1`` holds the mixed or substituted orbital."""
        cols = list(range(self.n))
        v = np.stack([H.hermval(x, self._c[k]) for k in cols], axis=-1)
        d1 = np.stack([H.hermval(x, self._d1[k]) for k in cols], axis=-1)
        d2 = np.stack([H.hermval(x, self._d2[k]) for k in cols], axis=-1)
        top = self.n
        if last is None:
            t = theta[0]
            v[..., -1] += t * H.hermval(x, self._c[top])
            d1[..., -1] += t * H.hermval(x, self._d1[top])
            d2[..., -1] += t * H.hermval(x, self._d2[top])
        else:
            v[..., -1] = H.hermval(x, self._c[last])
            d1[..., -1] = H.hermval(x, self._d1[last])
            d2[..., -1] = H.hermval(x, self._d2[last])
        return v, d1, d2

    def _det_parts(self, v, d1, d2):
        n = self.n
        P = np.linalg.det(v)
        cof = np.empty_like(v)
        for i in range(n):
            for j in range(n):
                minor = np.delete(np.delete(v, i, axis=1), j, axis=2)
                cof[:, i, j] = (-1) ** (i + j) * np.linalg.det(minor)
        grad = np.sum(d1 * cof, axis=2)
        lap = np.sum(d2 * cof, axis=(1, 2))
        return P, grad, lap

    def poly(self, theta, x):
        return self._det_parts(*self._tables(x, theta, None))

    def theta_poly(self, theta, x):
        Q, gQ, lQ = self._det_parts(*self._tables(x, theta, self.n))
        return Q[:, None], gQ[:, None, :], lQ[:, None]


# --------------------------------------------------------------------------- catalog


@dataclass(frozen=True, eq=False)
class ModelCatalogEntry:
    """A model wired with its trial family, references and run defaults."""

    name: str
    model: Model
    family: TrialFamily
    theta0: np.ndarray
    references: Mapping[str, float] = field(default_factory=dict)
    defaults: Mapping[str, object] = field(default_factory=dict)
    test_functions: Mapping[str, TestFunction] = field(default_factory=dict)
    description: str = ""
    experimental: bool = False

    def describe(self) -> dict:
        """JSON-friendly metadata."""
        return {
            "name": self.name,
            "description": self.description,
            "dimension": self.model.dimension,
            "n_params": self.family.n_params,
            "theta0": [float(t) for t in self.theta0],
            "group_order": len(self.model.group),
            "fermionic": self.model.group.fermionic,
            "box": [[float(a), float(b)] for a, b in zip(self.model.lower, self.model.upper)],
            "references": {k: float(v) for k, v in self.references.items()},
            "defaults": {k: _jsonable(v) for k, v in self.defaults.items()},
            "test_functions": list(self.test_functions),
            "experimental": self.experimental,
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


def _params(params: Mapping | None, allowed: Mapping[str, object]) -> dict:
    params = dict(params or {})
    unknown = set(params) - set(allowed)
    if unknown:
        raise UsageError(f"unknown model parameters: {sorted(unknown)}")
    out = dict(allowed)
    out.update(params)
    return out


def _oscillator(omega) -> Callable[[np.ndarray], np.ndarray]:
    omega = np.asarray(omega, dtype=float)
    return lambda x: 0.5 * np.sum((x * omega) ** 2, axis=1)


def _build_interval(params) -> ModelCatalogEntry:
    p = _params(params, {"lo": 0.0, "hi": 1.0, "theta": 0.0})
    lo, hi, th = float(p["lo"]), float(p["hi"]), float(p["theta"])
    fam = BoxSineFamily([lo], [hi], name="interval_sine")
    L = hi - lo + th
    model = Model(
        "interval",
        1,
        lambda x: np.zeros(x.shape[0]),
        SymmetryGroup.trivial(1),
        [lo],
        [lo + L],
        references={"energy": np.pi**2 / (2 * L**2), "dE_dtheta": -np.pi**2 / L**3},
    )
    return ModelCatalogEntry(
        "interval",
        model,
        fam,
        np.array([th]),
        dict(model.references),
        {"lam": 0.0, "dt": 2.5e-4, "T": 3.0, "N": 5000, "grid_h": 0.005, "mode": "plain"},
        {},
        "free particle on an interval with Dirichlet ends; theta moves the right end",
    )


def _build_square(params) -> ModelCatalogEntry:
    p = _params(params, {"side": 1.0})
    s = float(p["side"])
    fam = BoxSineFamily([0.0, 0.0], [s, s], name="square_sine")
    model = Model(
        "square",
        2,
        lambda x: np.zeros(x.shape[0]),
        SymmetryGroup.trivial(2),
        [0.0, 0.0],
        [s, s],
        references={"energy": np.pi**2 / s**2},
    )
    return ModelCatalogEntry(
        "square", model, fam, np.zeros(1), dict(model.references),
        {"lam": 0.0, "grid_h": 0.01}, {}, "free particle in a square with Dirichlet walls",
    )


def _build_harmonic(params) -> ModelCatalogEntry:
    _params(params, {})
    model = Model(
        "harmonic1d", 1, _oscillator([1.0]), SymmetryGroup.trivial(1), [-6.0], [6.0],
        references={"energy": 0.5},
    )
    return ModelCatalogEntry(
        "harmonic1d", model, GaussianHarmonicFamily(), np.zeros(1), {"energy": 0.5},
        {"lam": 0.0, "dt": 0.01, "mode": "drifted", "grid_h": 0.02}, {},
        "one-dimensional harmonic oscillator on the full line",
    )


def _build_two_fermion(params) -> ModelCatalogEntry:
    p = _params(params, {"coupling": 0.0, "range": 1.0})
    g, r = float(p["coupling"]), float(p["range"])
    base = _oscillator([1.0, 1.0])
    if g == 0.0:
        V = base
        floor = 0.0
    else:
        V = lambda x: base(x) + g * np.exp(-0.5 * ((x[:, 0] - x[:, 1]) / r) ** 2)  # noqa: E731
        floor = min(0.0, g)
    swap = SymmetryOperation.permutation((1, 0), "swap")
    group = SymmetryGroup((SymmetryOperation.identity(2), swap))
    model = Model("two_fermion_trap", 2, V, group, [-5.0, -5.0], [5.0, 5.0],
                  references={"energy": 2.0} if g == 0.0 else {}, potential_floor=floor)
    fam = TwoFermionFamily()
    tests = {
        "dpsi_dtheta": lambda x: fam.theta_grad(np.zeros(1), x)[:, 0],
        "x1-x2": lambda x: x[:, 0] - x[:, 1],
        "x1^3-x2^3": lambda x: x[:, 0] ** 3 - x[:, 1] ** 3,
    }
    return ModelCatalogEntry(
        "two_fermion_trap", model, fam, np.zeros(1), dict(model.references),
        {"lam": 0.0, "dt": 0.005, "T": 2.0, "N": 10000, "mode": "plain", "grid_h": 0.05,
         "theta_range": 0.15},
        tests,
        "two 1D fermions in a harmonic trap; the coincidence node is symmetry-forced",
        experimental=g != 0.0,
    )


def _build_odd_well(params) -> ModelCatalogEntry:
    _params(params, {})
    omega = np.array([1.0, 2.0, 3.0])
    model = Model(
        "odd_well3d", 3, _oscillator(omega),
        SymmetryGroup((SymmetryOperation.identity(3), SymmetryOperation.inversion(3))),
        [-6.0] * 3, [6.0] * 3, references={"energy": 4.0},
    )
    fam = OddWellFamily(omega)
    G = fam.gaussian
    tests = {
        "yG": lambda x: x[:, 1] * G(x),
        "zG": lambda x: x[:, 2] * G(x),
        "y": lambda x: x[:, 1],
        "z": lambda x: x[:, 2],
        "y^3": lambda x: x[:, 1] ** 3,
        "z^3": lambda x: x[:, 2] ** 3,
        "y^2z": lambda x: x[:, 1] ** 2 * x[:, 2],
        "yz^2": lambda x: x[:, 1] * x[:, 2] ** 2,
    }
    return ModelCatalogEntry(
        "odd_well3d", model, fam, np.zeros(2), {"energy": 4.0},
        {"lam": 0.0, "dt": 0.005, "T": 2.0, "N": 20000, "mode": "plain", "init": "trial",
         "grid_h": 0.15, "grid_lower": [-5.25, -3.75, -3.0], "grid_upper": [5.25, 3.75, 3.0]},
        tests,
        "anisotropic 3D oscillator with inversion symmetry and a tilting nodal plane",
    )


def _build_n_fermion(params) -> ModelCatalogEntry:
    p = _params(params, {"n": 3, "alpha": 0.0})
    n, alpha = int(p["n"]), float(p["alpha"])
    if not 2 <= n <= 6:
        raise UsageError("n_fermion_trap_1d supports 2 <= n <= 6")
    model = Model(
        "n_fermion_trap_1d", n, _oscillator(np.ones(n)), SymmetryGroup.permutations(n),
        [-5.0] * n, [5.0] * n, references={"energy": n * n / 2.0},
    )
    fam = HermiteSlaterFamily(n, alpha)
    return ModelCatalogEntry(
        "n_fermion_trap_1d", model, fam, np.zeros(1), {"energy": n * n / 2.0},
        {"lam": 0.0, "dt": 0.005, "T": 2.0, "N": 10000, "mode": "plain"},
        {"x1-x2": lambda x: x[:, 0] - x[:, 1]},
        "N non-interacting 1D fermions; Slater determinant with optional pair Jastrow",
        experimental=True,
    )


CATALOG: dict[str, Callable[[Mapping | None], ModelCatalogEntry]] = {
    "interval": _build_interval,
    "square": _build_square,
    "harmonic1d": _build_harmonic,
    "two_fermion_trap": _build_two_fermion,
    "odd_well3d": _build_odd_well,
    "n_fermion_trap_1d": _build_n_fermion,
}


def list_models() -> list[str]:
    return list(CATALOG)


def make_model(name: str, parameters: Mapping | None = None) -> ModelCatalogEntry:
    """Build a catalog entry and validate its trial family's skew symmetry.

    Raises
    ------
    UsageError
        for an unknown name or parameter, or a family that fails the check.
    """
    try:
        builder = CATALOG[name]
    except KeyError:
        raise UsageError(f"unknown model {name!r}; available: {', '.join(CATALOG)}") from None
    entry = builder(parameters)
    pts = halton_points(entry.model.lower, entry.model.upper, 256)
    res = verify_skew_symmetry(entry.family, entry.theta0, entry.model.group, pts)
    if res > 1e-10:
        raise UsageError(f"{name}: trial family is not skew-symmetric (residual {res:.2e})")
    return entry


_WHAT = {
    "value": "value",
    "grad": "grad",
    "laplacian": "laplacian",
    "theta_grad": "theta_grad",
    "laplacian_of_theta_grad": "laplacian_theta_grad",
    "laplacian_theta_grad": "laplacian_theta_grad",
}


def evaluate_trial(entry: ModelCatalogEntry, theta, x, what: str = "value") -> np.ndarray:
    """Evaluate one derivative surface of the entry's trial family.

    ``x`` may be a single configuration or a batch; the leading batch axis is
    dropped for a single configuration.
    """
    try:
        meth = getattr(entry.family, _WHAT[what])
    except KeyError:
        raise UsageError(f"unknown trial quantity {what!r}") from None
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    out = meth(entry.family.check_theta(theta), np.atleast_2d(arr))
    return out[0] if single else out
