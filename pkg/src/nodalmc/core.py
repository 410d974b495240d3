"""Domain types, symmetry-group machinery, local energy and node velocities.

Positions are plain ``numpy`` arrays. A single configuration has shape
``(d,)``; batched evaluations use ``(n, d)``. Every trial family evaluates
batches, the scalar helpers here wrap them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

__all__ = [
    "NodalMCError",
    "UsageError",
    "NodeProximityError",
    "DegenerateNodeError",
    "NumericalError",
    "SymmetryOperation",
    "SymmetryGroup",
    "TrialFamily",
    "Model",
    "as_configuration",
    "apply_symmetry",
    "verify_skew_symmetry",
    "local_energy",
    "local_energy_batch",
    "nodal_shape_velocity",
    "shape_velocity_batch",
    "halton_points",
]


class NodalMCError(Exception):
    """Base class for errors raised by this package."""


class UsageError(NodalMCError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(NodalMCError, ArithmeticError):
    """A numerical or statistical procedure could not deliver a result."""


class NodeProximityError(NumericalError):
    """Evaluation point lies numerically on the nodal surface."""


class DegenerateNodeError(NumericalError):
    """The spatial gradient of the trial function vanishes on the node."""


def as_configuration(x, dimension: int | None = None) -> np.ndarray:
    """Validate a single configuration and return it as a float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise UsageError(f"configuration must be 1-D, got shape {arr.shape}")
    if dimension is not None and arr.shape[0] != dimension:
        raise UsageError(f"configuration has length {arr.shape[0]}, expected {dimension}")
    if not np.all(np.isfinite(arr)):
        raise UsageError("configuration has non-finite entries")
    return arr


def _batch(x, dimension: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != dimension:
        raise UsageError(f"points have dimension {arr.shape[-1]}, expected {dimension}")
    return arr, single


def halton_points(lower, upper, n: int) -> np.ndarray:
    """Deterministic quasi-random points in a box (unscrambled Halton, first point skipped)."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    sampler = qmc.Halton(d=lower.size, scramble=False)
    sampler.fast_forward(1)
    return qmc.scale(sampler.random(n), lower, upper)


# --------------------------------------------------------------------------- symmetry


def _signed_permutation_parity(m: np.ndarray) -> int | None:
    """Exact determinant of a signed permutation matrix, ``None`` otherwise."""
    if not np.all(np.isin(m, (-1.0, 0.0, 1.0))):
        return None
    nz = m != 0
    if not (np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1)):
        return None
    perm = np.argmax(nz, axis=1)
    signs = m[np.arange(m.shape[0]), perm]
    # parity of the permutation by cycle counting
    seen = np.zeros(perm.size, dtype=bool)
    transpositions = 0
    for start in range(perm.size):
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length:
            transpositions += length - 1
    return int((-1) ** transpositions * np.prod(signs))


@dataclass(frozen=True, eq=False)
class SymmetryOperation:
    """An orthogonal map ``x -> matrix @ x`` together with its determinant."""

    matrix: np.ndarray
    parity: int
    name: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise UsageError("symmetry matrix must be square")
        if np.max(np.abs(m.T @ m - np.eye(m.shape[0]))) > 1e-12:
            raise UsageError("symmetry matrix is not orthogonal")
        if self.parity not in (1, -1):
            raise UsageError("parity must be +1 or -1")
        exact = _signed_permutation_parity(m)
        det = exact if exact is not None else int(round(np.linalg.det(m)))
        if det != self.parity:
            raise UsageError(f"parity {self.parity} disagrees with determinant {det}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_matrix(cls, matrix, name: str = "") -> "SymmetryOperation":
        m = np.asarray(matrix, dtype=float)
        exact = _signed_permutation_parity(m)
        parity = exact if exact is not None else int(round(np.linalg.det(m)))
        return cls(m, parity, name)

    @classmethod
    def identity(cls, dimension: int) -> "SymmetryOperation":
        return cls(np.eye(dimension), 1, "id")

    @classmethod
    def inversion(cls, dimension: int) -> "SymmetryOperation":
        return cls.from_matrix(-np.eye(dimension), "inv")

    @classmethod
    def permutation(cls, perm: Sequence[int], name: str = "") -> "SymmetryOperation":
        """Coordinate permutation ``(Sx)_i = x_{perm[i]}``."""
        d = len(perm)
        m = np.zeros((d, d))
        m[np.arange(d), list(perm)] = 1.0
        return cls.from_matrix(m, name or "perm" + "".join(map(str, perm)))

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T

    def compose(self, other: "SymmetryOperation") -> "SymmetryOperation":
        """Return ``self o other``."""
        return SymmetryOperation(self.matrix @ other.matrix, self.parity * other.parity)

    def same_as(self, other: "SymmetryOperation", tol: float = 1e-12) -> bool:
        return self.matrix.shape == other.matrix.shape and np.max(
            np.abs(self.matrix - other.matrix)
        ) <= tol


@dataclass(frozen=True, eq=False)
class SymmetryGroup:
    """Finite group of orthogonal maps; closure and inverses are checked on construction."""

    elements: tuple[SymmetryOperation, ...]

    def __post_init__(self):
        elems = tuple(self.elements)
        if not elems:
            raise UsageError("symmetry group is empty")
        d = elems[0].dimension
        if any(e.dimension != d for e in elems):
            raise UsageError("group elements have mixed dimensions")
        ident = SymmetryOperation.identity(d)
        if not any(e.same_as(ident) for e in elems):
            raise UsageError("group lacks the identity")
        for a, b in itertools.product(elems, repeat=2):
            ab = a.compose(b)
            if not any(ab.same_as(c, 1e-10) for c in elems):
                raise UsageError("group is not closed under composition")
        for a in elems:
            inv = SymmetryOperation(a.matrix.T, a.parity)
            if not any(inv.same_as(c, 1e-10) for c in elems):
                raise UsageError("group lacks an inverse")
        object.__setattr__(self, "elements", elems)

    @classmethod
    def trivial(cls, dimension: int) -> "SymmetryGroup":
        return cls((SymmetryOperation.identity(dimension),))

    @classmethod
    def generated_by(cls, generators: Sequence[SymmetryOperation]) -> "SymmetryGroup":
        d = generators[0].dimension
        elems = [SymmetryOperation.identity(d)]
        frontier = list(generators)
        while frontier:
            g = frontier.pop()
            if any(g.same_as(e, 1e-10) for e in elems):
                continue
            elems.append(g)
            frontier.extend(g.compose(h) for h in list(elems))
            frontier.extend(h.compose(g) for h in list(elems))
        return cls(tuple(elems))

    @classmethod
    def permutations(cls, n: int) -> "SymmetryGroup":
        return cls(tuple(SymmetryOperation.permutation(p) for p in itertools.permutations(range(n))))

    @property
    def dimension(self) -> int:
        return self.elements[0].dimension

    @property
    def fermionic(self) -> bool:
        return any(e.parity == -1 for e in self.elements)

    def odd_elements(self) -> tuple[SymmetryOperation, ...]:
        return tuple(e for e in self.elements if e.parity == -1)

    def even_subgroup(self) -> "SymmetryGroup":
        return SymmetryGroup(tuple(e for e in self.elements if e.parity == 1))

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)


def apply_symmetry(op: SymmetryOperation, x) -> np.ndarray:
    """Apply ``op`` to one configuration or a batch of them."""
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1] != op.dimension:
        raise UsageError(f"cannot apply a {op.dimension}-D symmetry to {arr.shape[-1]}-D points")
    return op(arr)


# --------------------------------------------------------------------------- trial functions


class TrialFamily:
    """Parametrized trial wave function with analytic derivatives.

    Subclasses implement the five batch evaluators. ``x`` has shape ``(n, d)``
    and ``theta`` shape ``(p,)``. Results have shapes ``(n,)``, ``(n, d)``,
    ``(n,)``, ``(n, p)`` and ``(n, p)`` respectively.
    """

    name: str = "trial"
    dimension: int
    n_params: int

    def value(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def grad(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def laplacian(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def theta_grad(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def laplacian_theta_grad(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def check_theta(self, theta) -> np.ndarray:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        if th.shape != (self.n_params,):
            raise UsageError(f"{self.name}: theta must have {self.n_params} entries, got {th.shape}")
        return th

    def value_and_grad(self, theta, x) -> tuple[np.ndarray, np.ndarray]:
        return self.value(theta, x), self.grad(theta, x)

    def local_energy(self, theta, x, v) -> np.ndarray:
        """``v - Laplacian(psi) / (2 psi)`` given potential values ``v``.

        Families override this to arrange the arithmetic so that exact
        eigenfunctions give a bit-exact constant.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            return v - 0.5 * self.laplacian(theta, x) / self.value(theta, x)


@dataclass(frozen=True, eq=False)
class Model:
    """Hamiltonian ``-Laplacian/2 + V`` with its symmetry group and simulation box."""

    name: str
    dimension: int
    potential: Callable[[np.ndarray], np.ndarray]
    group: SymmetryGroup
    lower: np.ndarray
    upper: np.ndarray
    references: Mapping[str, float] = field(default_factory=dict)
    potential_floor: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != (self.dimension,) or hi.shape != (self.dimension,) or np.any(hi <= lo):
            raise UsageError(f"{self.name}: invalid simulation box")
        if self.group.dimension != self.dimension:
            raise UsageError(f"{self.name}: group dimension mismatch")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        pts = halton_points(lo, hi, 256)
        v = self.V(pts)
        if not np.all(np.isfinite(v)) or np.min(v) < self.potential_floor - 1e-12:
            raise UsageError(f"{self.name}: potential not finite or below its declared floor")
        for op in self.group:
            if np.max(np.abs(self.V(op(pts)) - v)) >= 1e-10:
                raise UsageError(f"{self.name}: potential is not invariant under the group")

    def V(self, x) -> np.ndarray:
        arr, single = _batch(x, self.dimension)
        out = np.asarray(self.potential(arr), dtype=float)
        return out[0] if single else out

    @property
    def box_diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))


# --------------------------------------------------------------------------- diagnostics


def verify_skew_symmetry(family: TrialFamily, theta, group: SymmetryGroup, sample_points) -> float:
    """Largest relative skew-symmetry residual over points and group elements.

    Returns ``max |psi(Sx) - det(S) psi(x)| / (1 + |psi(x)|)``.
    """
    pts, _ = _batch(sample_points, family.dimension)
    if pts.shape[0] == 0:
        raise UsageError("need at least one sample point")
    theta = family.check_theta(theta)
    base = family.value(theta, pts)
    worst = 0.0
    for op in group:
        res = np.abs(family.value(theta, op(pts)) - op.parity * base) / (1.0 + np.abs(base))
        worst = max(worst, float(np.max(res)))
    return worst


def local_energy_batch(model: Model, family: TrialFamily, theta, x) -> np.ndarray:
    """``V - Laplacian(psi) / (2 psi)`` without node checks (may be inf on the node)."""
    theta = family.check_theta(theta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return family.local_energy(theta, x, model.V(x))


def local_energy(model: Model, family: TrialFamily, theta, x) -> float:
    """Local energy at one configuration.

    Raises
    ------
    NodeProximityError
        if ``|psi| < 1e-12 (1 + |grad psi| * box_diagonal)``.
    """
    x = as_configuration(x, model.dimension)[None, :]
    theta = family.check_theta(theta)
    psi = family.value(theta, x)[0]
    gnorm = float(np.linalg.norm(family.grad(theta, x)[0]))
    if abs(psi) < 1e-12 * (1.0 + gnorm * model.box_diagonal):
        raise NodeProximityError(f"|psi|={abs(psi):.3e} too close to the node")
    return float(family.local_energy(theta, x, model.V(x))[0])


def shape_velocity_batch(family: TrialFamily, theta, x) -> np.ndarray:
    """``grad_theta psi / |grad psi|`` at node points, shape ``(n, p)``."""
    theta = family.check_theta(theta)
    g = np.linalg.norm(family.grad(theta, x), axis=-1)
    return family.theta_grad(theta, x) / g[:, None]


def nodal_shape_velocity(family: TrialFamily, theta, x_on_node, node_tol: float = 1e-8) -> np.ndarray:
    """Normal displacement speed of the node per unit parameter change.

    The node moves along the outward normal of the positive domain with speed
    ``grad_theta psi / |grad psi|``, obtained by differentiating
    ``psi_{theta+h}(x + r n) = 0`` in ``h``.
    """
    x = as_configuration(x_on_node, family.dimension)[None, :]
    theta = family.check_theta(theta)
    psi = family.value(theta, x)[0]
    g = float(np.linalg.norm(family.grad(theta, x)[0]))
    if g <= 1e-300 or not np.isfinite(g):
        raise DegenerateNodeError("spatial gradient vanishes at the node point")
    if abs(psi) > node_tol * max(1.0, g):
        raise UsageError(f"point is not on the node (|psi|={abs(psi):.3e})")
    return family.theta_grad(theta, x)[0] / g
