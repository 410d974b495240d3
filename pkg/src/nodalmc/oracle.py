"""Deterministic grid references.

Second-order finite differences on a tensor grid with Dirichlet conditions on
the box faces and on the node of the trial function. Nodes that cut between
grid points are handled with the symmetric ghost-point correction: for an
inside point ``p`` whose neighbour ``q`` lies outside, the interface sits at
fraction ``s = psi_p / (psi_p - psi_q)`` of the spacing and the missing
neighbour contributes ``1 / (2 s h^2)`` to the diagonal. This keeps the
operator symmetric and the energy smooth in the node parameters, which a
plain staircase mask does not.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg, lobpcg

from .core import Model, NumericalError, TrialFamily, UsageError

__all__ = [
    "GridSpec",
    "OracleSolution",
    "TopologyChangeWarning",
    "SpectralError",
    "solve_dirichlet_groundstate",
    "finite_difference_theta_gradient",
    "solve_exit_functional",
    "boundary_flux_functional",
    "analytic_interval_reference",
    "IntervalReference",
    "dump_solution",
    "load_solution",
]

S_MIN = 1e-3
MAGIC = b"NODALMC1"


class TopologyChangeWarning(RuntimeWarning):
    """Number of connected domain components changed between finite-difference points."""


class SpectralError(NumericalError):
    """The shifted operator is not positive definite."""


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid including the box faces; face points carry the Dirichlet value."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        n = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(lo) == len(hi) == len(n)) or not 1 <= len(n) <= 3:
            raise UsageError("grid needs 1 to 3 axes with matching bounds and counts")
        if any(c < 16 for c in n):
            raise UsageError("every axis needs at least 16 points")
        if any(b <= a for a, b in zip(lo, hi)):
            raise UsageError("grid bounds must be increasing")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", n)

    @classmethod
    def from_spacing(cls, lower, upper, h: float) -> "GridSpec":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        counts = np.rint((hi - lo) / h).astype(int) + 1
        return cls(tuple(lo), tuple(hi), tuple(counts))

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.counts) - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lower, self.upper, self.counts)]

    def points(self) -> np.ndarray:
        """All grid points, row-major, shape ``(prod(counts), ndim)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class OracleSolution:
    """Grid groundstate.

    ``domain_mask`` holds 2 for unknowns inside the domain, 1 for outside
    points adjacent to the domain and 0 elsewhere. ``values`` are zero off
    the domain, positive inside and normalised to unit ``L2`` norm.
    """

    energy: float
    values: np.ndarray
    domain_mask: np.ndarray
    residual: float
    grid: GridSpec
    iterations: int = 0
    converged: bool = True
    n_components: int = 1
    metadata: dict = field(default_factory=dict)

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(f) * self.grid.cell_volume)


@dataclass
class _Operator:
    A: sp.csr_matrix
    index: np.ndarray
    inside: np.ndarray
    points: np.ndarray
    # interface crossings: (row, boundary point, weight 1/(2 s h^2), axis, direction, s)
    cross_rows: np.ndarray
    cross_points: np.ndarray
    cross_coef: np.ndarray
    cross_axis: np.ndarray
    cross_dir: np.ndarray
    cross_s: np.ndarray


def _trial_values(grid, family, theta, pts):
    if family is None:
        return None
    return family.value(family.check_theta(theta), pts).reshape(grid.shape)


def _build(model: Model, grid: GridSpec, family: TrialFamily | None, theta) -> _Operator:
    if grid.ndim != model.dimension:
        raise UsageError("grid and model dimensions differ")
    pts = grid.points()
    shape = grid.shape
    psi = _trial_values(grid, family, theta, pts)
    inside = np.ones(shape, dtype=bool)
    if psi is not None:
        inside &= psi > 1e-12 * np.max(np.abs(psi))
    edge = np.zeros(shape, dtype=bool)
    for a in range(grid.ndim):
        sl = [slice(None)] * grid.ndim
        sl[a] = 0
        edge[tuple(sl)] = True
        sl[a] = -1
        edge[tuple(sl)] = True
    inside &= ~edge
    n = int(inside.sum())
    if n == 0:
        raise UsageError("empty domain on this grid")
    index = -np.ones(shape, dtype=np.int64)
    index[inside] = np.arange(n)
    h = grid.spacing
    V = model.V(pts).reshape(shape)
    diag = V[inside].astype(float).copy()
    rows, cols, vals = [], [], []
    c_rows, c_pts, c_coef, c_axis, c_dir, c_s = [], [], [], [], [], []
    flat_inside = np.flatnonzero(inside.ravel())
    for a in range(grid.ndim):
        w = 0.5 / h[a] ** 2
        for direction in (-1, 1):
            # neighbour index of each inside point along (a, direction)
            nb_idx = np.roll(index, -direction, axis=a)[inside]
            me = index[inside]
            has = nb_idx >= 0
            # np.roll wraps around, but wrapped neighbours are edge points (never inside)
            rows.append(me[has])
            cols.append(nb_idx[has])
            vals.append(np.full(has.sum(), -w))
            diag[has] += w
            miss = ~has
            if psi is None:
                s = np.ones(miss.sum())
            else:
                pp = psi[inside][miss]
                pq = np.roll(psi, -direction, axis=a)[inside][miss]
                # box faces count as Dirichlet at the grid face point
                qe = np.roll(edge, -direction, axis=a)[inside][miss]
                with np.errstate(divide="ignore", invalid="ignore"):
                    s = np.where(pq <= 0, pp / (pp - pq), 1.0)
                s = np.where(qe & (pq > 0), 1.0, s)
                s = np.clip(s, S_MIN, 1.0)
            diag[miss] += w / s
            base = pts[flat_inside[miss]]
            bp = base.copy()
            bp[:, a] += direction * s * h[a]
            c_rows.append(me[miss])
            c_pts.append(bp)
            c_coef.append(w / s)
            c_axis.append(np.full(miss.sum(), a))
            c_dir.append(np.full(miss.sum(), direction))
            c_s.append(s)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return _Operator(
        A, index, inside, pts,
        np.concatenate(c_rows), np.concatenate(c_pts), np.concatenate(c_coef),
        np.concatenate(c_axis), np.concatenate(c_dir), np.concatenate(c_s),
    )


def _gershgorin_lower(A: sp.csr_matrix) -> float:
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - off))


def _cg(B, b, x0, M, rtol):
    x, info = cg(B, b, x0=x0, rtol=rtol, atol=0.0, maxiter=20 * B.shape[0], M=M)
    if info != 0:
        raise NumericalError("conjugate gradients did not converge")
    return x


def _inverse_iteration(A, v0, tol_e=1e-10, tol_r=1e-8, max_iter=500):
    sigma = _gershgorin_lower(A)
    sigma -= 1e-3 * (1.0 + abs(sigma))
    n = A.shape[0]
    B = (A - sigma * sp.identity(n, format="csr")).tocsr()
    dinv = 1.0 / B.diagonal()
    M = LinearOperator((n, n), matvec=lambda r: dinv * r, dtype=float)
    v = v0 / np.linalg.norm(v0)
    Av = A @ v
    E = float(v @ Av)
    res = np.inf
    for it in range(1, max_iter + 1):
        # warm start: the next iterate is close to v / (E - sigma)
        rtol = min(1e-3, 1e-2 * res) if np.isfinite(res) else 1e-3
        y = _cg(B, v, v / max(E - sigma, 1e-300), M, rtol=max(rtol, 1e-14))
        v_new = y / np.linalg.norm(y)
        Av = A @ v_new
        E_new = float(v_new @ Av)
        res = float(np.linalg.norm(Av - E_new * v_new))
        dE = abs(E_new - E)
        v, E = v_new, E_new
        if dE <= tol_e * abs(E) and res < tol_r:
            return E, v, res, it, True
    return E, v, res, max_iter, False


def _lobpcg(A, v0, tol_r=1e-8):
    M = sp.diags(1.0 / A.diagonal())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w, X = lobpcg(A, v0[:, None], M=M, tol=tol_r * 1e-2, maxiter=2000, largest=False)
    v = X[:, 0] / np.linalg.norm(X[:, 0])
    Av = A @ v
    E = float(v @ Av)
    return E, v, float(np.linalg.norm(Av - E * v))


def solve_dirichlet_groundstate(model: Model, family: TrialFamily | None = None, theta=None,
                                grid: GridSpec | None = None, method: str = "auto",
                                max_iter: int = 400) -> OracleSolution:
    """Lowest Dirichlet eigenpair on the positive domain of the trial function.

    Without a family the domain is the open grid box. The eigenpair comes
    from inverse iteration with a Gershgorin shift and Jacobi-preconditioned
    conjugate-gradient inner solves; ``method="lobpcg"`` uses LOBPCG instead,
    and ``"auto"`` falls back to it when inverse iteration stalls.
    """
    if grid is None:
        raise UsageError("a grid is required")
    op = _build(model, grid, family, theta)
    A = op.A
    if family is not None:
        v0 = np.abs(family.value(family.check_theta(theta), op.points[op.inside.ravel()]))
        v0 = v0 + 1e-3 * v0.max()
    else:
        v0 = np.ones(A.shape[0])
    converged = True
    if method in ("auto", "inverse"):
        E, v, res, it, converged = _inverse_iteration(A, v0, max_iter=max_iter)
        if not converged and method == "auto":
            E2, v2, res2 = _lobpcg(A, v)
            if res2 < res:
                E, v, res = E2, v2, res2
            converged = res < 1e-8
    elif method == "lobpcg":
        E, v, res = _lobpcg(A, v0)
        it = 0
        converged = res < 1e-8
    else:
        raise UsageError(f"unknown method {method!r}")
    if v.sum() < 0:
        v = -v
    vals = np.zeros(grid.shape)
    vals[op.inside] = v
    vals /= math.sqrt(np.sum(vals**2) * grid.cell_volume)
    mask = np.zeros(grid.shape, dtype=np.int8)
    dil = ndimage.binary_dilation(op.inside)
    mask[dil & ~op.inside] = 1
    mask[op.inside] = 2
    ncomp = ndimage.label(op.inside)[1]
    if not converged:
        warnings.warn(f"eigensolver stopped with residual {res:.2e}", RuntimeWarning, stacklevel=2)
    return OracleSolution(
        E, vals, mask, res, grid, it, converged, ncomp,
        {"unknowns": int(A.shape[0]), "min_interior": float(vals[op.inside].min())},
    )


def finite_difference_theta_gradient(model: Model, family: TrialFamily, theta, grid: GridSpec,
                                     delta: float = 0.02, return_energies: bool = False):
    """Central differences ``(E(theta + delta e_k) - E(theta - delta e_k)) / (2 delta)``.

    Warns with ``TopologyChangeWarning`` when the two domains have different
    numbers of connected components.
    """
    theta = family.check_theta(theta)
    grad = np.zeros(family.n_params)
    energies = []
    for k in range(family.n_params):
        e = np.zeros_like(theta)
        e[k] = delta
        sp_ = solve_dirichlet_groundstate(model, family, theta + e, grid)
        sm_ = solve_dirichlet_groundstate(model, family, theta - e, grid)
        if sp_.n_components != sm_.n_components:
            warnings.warn(
                f"component count changes ({sm_.n_components} -> {sp_.n_components}) across "
                f"theta[{k}] +- {delta}", TopologyChangeWarning, stacklevel=2)
        grad[k] = (sp_.energy - sm_.energy) / (2 * delta)
        energies.append((sm_.energy, sp_.energy))
    return (grad, energies) if return_energies else grad


def solve_exit_functional(model: Model, grid: GridSpec, lam: float, phi_boundary: Callable,
                          family: TrialFamily | None = None, theta=None,
                          groundstate: OracleSolution | None = None):
    """Solve ``(H - lam) h = 0`` with ``h = phi`` on the domain boundary.

    Returns
    -------
    h : grid array (zero off the domain)
    functional : float
        Average of ``h`` against the density proportional to the groundstate.
    """
    op = _build(model, grid, family, theta)
    if groundstate is None:
        groundstate = solve_dirichlet_groundstate(model, family, theta, grid)
    if lam >= groundstate.energy:
        raise SpectralError(f"lam={lam} is not below the groundstate energy {groundstate.energy:.6g}")
    n = op.A.shape[0]
    b = np.zeros(n)
    np.add.at(b, op.cross_rows, op.cross_coef * np.asarray(phi_boundary(op.cross_points), float))
    B = (op.A - lam * sp.identity(n, format="csr")).tocsr()
    d = B.diagonal()
    M = LinearOperator((n, n), matvec=lambda r: r / d, dtype=float)
    x = _cg(B, b, None, M, rtol=1e-12)
    hgrid = np.zeros(grid.shape)
    hgrid[op.inside] = x
    psi = groundstate.values
    return hgrid, float(np.sum(hgrid * psi) / np.sum(psi))


def boundary_flux_functional(solution: OracleSolution, model: Model, lam: float,
                             phi_boundary: Callable, family: TrialFamily | None = None,
                             theta=None) -> float:
    """Hitting functional from the boundary flux of the grid groundstate.

    ``int phi dmu = -sum phi dpsi/dn dS / (2 (E - lam) int psi)`` with the
    normal derivative taken by one-sided second-order differences along the
    grid axis of every interface crossing; each crossing carries the face
    area ``h^(d-1)``.
    """
    grid = solution.grid
    op = _build(model, grid, family, theta)
    h = grid.spacing
    psi_in = solution.values[op.inside]
    total = 0.0
    flat_shape = grid.shape
    coords = np.array(np.unravel_index(np.flatnonzero(op.inside.ravel()), flat_shape)).T
    for row, bp, a, direction, s in zip(op.cross_rows, op.cross_points, op.cross_axis,
                                        op.cross_dir, op.cross_s):
        c = coords[row].copy()
        p1 = psi_in[row]
        c[a] -= direction
        j = op.index[tuple(c)] if 0 <= c[a] < flat_shape[a] else -1
        # quadratic through (0, 0), (s h, p1), ((s + 1) h, p2) measured from the boundary inward
        t1, t2 = s * h[a], (s + 1) * h[a]
        if j >= 0:
            p2 = psi_in[j]
            slope = (p1 * t2**2 - p2 * t1**2) / (t1 * t2 * (t2 - t1))
        else:
            slope = p1 / t1
        # inward derivative is slope; outward normal derivative is -slope
        face = np.prod(np.delete(h, a)) if grid.ndim > 1 else 1.0
        total += float(phi_boundary(bp[None, :])[0]) * (-slope) * face
    mass = solution.integrate(solution.values)
    return -total / (2.0 * (solution.energy - lam) * mass)


@dataclass(frozen=True)
class IntervalReference:
    length: float
    energy: float
    psi: Callable[[np.ndarray], np.ndarray]
    normal_derivatives: tuple[float, float]
    dE_dtheta: float
    dE_da: float
    mu_functionals: dict


def analytic_interval_reference(theta: float = 0.0, lam: float = 0.0,
                                phi: dict[str, Callable] | None = None,
                                lo: float = 0.0, hi: float = 1.0,
                                a: float | None = None) -> IntervalReference:
    """Closed-form Dirichlet data of ``-f''/2`` on an interval.

    The interval is ``(lo, hi + theta)``, or ``(-a, a)`` when ``a`` is
    given. ``dE_dtheta`` is the derivative under motion of the right end,
    ``dE_da`` under symmetric outward motion of both ends. Hitting functionals
    are ``pi^2 (phi(left) + phi(right)) / (4 L^2 (E - lam))``.
    """
    if a is not None:
        lo, hi, theta = -a, a, 0.0
    left, right = lo, hi + theta
    L = right - left
    if L <= 0:
        raise UsageError("interval length must be positive")
    E = np.pi**2 / (2 * L**2)
    if lam >= E:
        raise UsageError("lam must be below the groundstate energy")
    funcs = {"mass": lambda x: np.ones_like(x), "x": lambda x: x}
    funcs.update(phi or {})
    mu = {}
    for name, f in funcs.items():
        vals = np.asarray(f(np.array([left, right])), dtype=float)
        mu[name] = float(np.pi**2 * (vals[0] + vals[1]) / (4 * L**2 * (E - lam)))
    return IntervalReference(
        L, E, lambda x: np.sin(np.pi * (np.asarray(x) - left) / L),
        (-np.pi / L, -np.pi / L), -np.pi**2 / L**3, -np.pi**2 / (4 * (L / 2) ** 3),
        mu,
    )


def dump_solution(solution: OracleSolution, path) -> tuple[Path, Path]:
    """Write ``values`` as a flat binary file plus a JSON sidecar.

    Layout: 8-byte magic ``NODALMC1``; little-endian ``uint32`` ndim; ``ndim``
    ``int64`` counts; ``ndim`` float64 lower bounds; ``ndim`` float64 upper
    bounds; float64 energy; then the row-major float64 grid values.
    """
    path = Path(path)
    g = solution.grid
    nd = g.ndim
    header = MAGIC + struct.pack(f"<I{nd}q{nd}d{nd}dd", nd, *g.counts, *g.lower, *g.upper,
                                 solution.energy)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(solution.values, dtype="<f8").tobytes(order="C"))
        side = path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps({
            "format": "little-endian float64, row-major",
            "header_bytes": len(header),
            "counts": list(g.counts), "lower": list(g.lower), "upper": list(g.upper),
            "energy": solution.energy, "residual": solution.residual,
            "converged": solution.converged,
        }, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write oracle dump to {path}: {exc}") from exc
    return path, side


def load_solution(path) -> tuple[GridSpec, float, np.ndarray]:
    """Read a dump written by ``dump_solution``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise UsageError("not an oracle dump")
    (nd,) = struct.unpack_from("<I", raw, 8)
    fmt = f"<{nd}q{nd}d{nd}dd"
    vals = struct.unpack_from(fmt, raw, 12)
    counts = vals[:nd]
    lower = vals[nd:2 * nd]
    upper = vals[2 * nd:3 * nd]
    energy = vals[3 * nd]
    off = 12 + struct.calcsize(fmt)
    data = np.frombuffer(raw, dtype="<f8", offset=off).reshape(counts)
    return GridSpec(lower, upper, counts), energy, data
