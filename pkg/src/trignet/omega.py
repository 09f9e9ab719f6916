"""Construction and grid verification of Omega-paths and error-gain maps."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gainalg import (
    GRID_MARGIN,
    CheckReport,
    CouplingGraph,
    GainExpr,
    GainMatrix,
    MAFKind,
    PowerGain,
    as_expr,
    compose,
    invert,
    log_grid,
    perron_vector,
    spectral_radius,
)

PHI_SHRINK = 1e-6
MAX_HALVINGS = 60


class PathProvenance(enum.Enum):
    LINEAR_PERRON = "linear_perron"
    TWO_BODY = "two_body_interpolation"
    USER = "user_supplied"


@dataclass(frozen=True)
class OmegaPath:
    """One class-K-infinity gain ``sigma_i`` per subsystem."""

    sigma: tuple[PowerGain, ...]
    provenance: PathProvenance = PathProvenance.USER

    def __post_init__(self):
        sigma = tuple(self.sigma)
        for i, s in enumerate(sigma):
            if s.is_zero:
                raise ValueError(f"sigma[{i}] must be positive (class K-infinity)")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "provenance", PathProvenance(self.provenance))

    @property
    def n(self) -> int:
        return len(self.sigma)

    def __call__(self, r) -> np.ndarray:
        return np.stack([s(r) for s in self.sigma])

    def inverse(self, i: int) -> PowerGain:
        return invert(self.sigma[i])

    @property
    def s_star(self) -> np.ndarray | None:
        """Direction vector when every component is linear, else ``None``."""
        if all(s.exponent == 1.0 for s in self.sigma):
            return np.array([s.coeff for s in self.sigma])
        return None


@dataclass(frozen=True)
class PhiMap:
    """Error gains ``phi_ij``; zero wherever the matching error gain is zero."""

    phi: tuple[tuple[GainExpr, ...], ...]

    def __post_init__(self):
        phi = tuple(tuple(as_expr(g) for g in row) for row in self.phi)
        n = len(phi)
        if any(len(row) != n for row in phi):
            raise ValueError("phi must be square")
        for i, row in enumerate(phi):
            for j, g in enumerate(row):
                if not g.is_zero and not g.is_single:
                    raise ValueError(f"phi[{i}][{j}] must be a single power term")
        object.__setattr__(self, "phi", phi)

    @property
    def n(self) -> int:
        return len(self.phi)

    @classmethod
    def zero(cls, n: int) -> "PhiMap":
        return cls(tuple(tuple(GainExpr.zero() for _ in range(n)) for _ in range(n)))


def verify_omega_condition(G: GainMatrix, sigma: OmegaPath, phi: PhiMap | None = None,
                           grid: np.ndarray | None = None) -> CheckReport:
    """Check ``mu_i(gamma_i.(sigma(r)), phi_i.(r)) < sigma_i(r)`` on the grid.

    The witness is the worst relative margin ``1 - lhs/sigma_i``; a point
    passes when that margin exceeds ``1e-9``.
    """
    n = G.n
    if sigma.n != n:
        raise ValueError(f"path has {sigma.n} components, gain matrix has {n}")
    phi = PhiMap.zero(n) if phi is None else phi
    if phi.n != n:
        raise ValueError(f"phi has {phi.n} rows, gain matrix has {n}")
    r = log_grid() if grid is None else np.asarray(grid, dtype=float)
    s = sigma(r)
    margins = np.empty((n, r.size))
    for i in range(n):
        terms = [G.entries[i][j](s[j]) for j in range(n)] + [phi.phi[i][j](r) for j in range(n)]
        lhs = G.row_maf[i].aggregate(np.stack(terms), axis=0)
        margins[i] = 1.0 - lhs / s[i]
    worst = float(margins.min())
    if worst > GRID_MARGIN:
        return CheckReport(True, "grid", worst, f"worst relative margin {worst:.6g} over {r.size} points")
    i, k = np.unravel_index(np.argmin(margins), margins.shape)
    return CheckReport(False, "grid", worst, f"row {i} violated at r={r[k]:.6g} (margin {worst:.6g})",
                       violation=(int(i), float(r[k])))


def build_omega_path_linear(coeffs, epsilon: float = 1e-3) -> OmegaPath:
    """Linear path ``sigma_i(r) = s_i * r`` for square-root gains ``G_ij * sqrt(r)``.

    ``G + eps*J`` is irreducible, so it has a positive Perron vector ``v``; for
    the square-root family the path direction is ``s = v**2`` (componentwise),
    which makes ``sum_j G_ij sqrt(s_j) < sqrt(s_i)`` hold row by row.
    """
    G = np.asarray(coeffs, dtype=float)
    rho = spectral_radius(G)
    if rho >= 1.0:
        raise ValueError(f"small-gain condition fails (spectral radius {rho:.6g} >= 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    eps = float(epsilon)
    for _ in range(MAX_HALVINGS + 1):
        rho_star, v = perron_vector(G + eps)
        if rho_star < 1.0:
            break
        eps /= 2.0
    else:
        raise ValueError("path construction failed; decrease epsilon")
    path = OmegaPath(tuple(PowerGain(vi * vi, 1.0) for vi in v), PathProvenance.LINEAR_PERRON)
    report = verify_omega_condition(GainMatrix.from_coefficients(G), path)
    if not report.verdict:
        raise ValueError(f"path construction failed; decrease epsilon ({report.detail})")
    return path


def choose_sigma2_twobody(gamma12: PowerGain, gamma21: PowerGain) -> OmegaPath:
    """Path ``(id, sigma_2)`` with ``gamma21 < sigma_2 < gamma12^{-1}``.

    With a common exponent the coefficient is the geometric mean of the two
    bracketing coefficients; otherwise a coefficient/exponent box is searched.
    """
    G = GainMatrix(((GainExpr.zero(), as_expr(gamma12)), (as_expr(gamma21), GainExpr.zero())),
                   (MAFKind.MAX, MAFKind.MAX))
    identity = PowerGain.identity()

    def checked(sigma2: PowerGain) -> OmegaPath | None:
        path = OmegaPath((identity, sigma2), PathProvenance.TWO_BODY)
        return path if verify_omega_condition(G, path).verdict else None

    if gamma12.is_zero and gamma21.is_zero:
        return OmegaPath((identity, identity), PathProvenance.TWO_BODY)
    if gamma12.is_zero:
        candidate = PowerGain(2.0 * gamma21.coeff, gamma21.exponent)
    elif gamma21.is_zero:
        upper = invert(gamma12)
        candidate = PowerGain(0.5 * upper.coeff, upper.exponent)
    else:
        cycle = compose(gamma12, gamma21)
        upper = invert(gamma12)
        if cycle.exponent == 1.0 and cycle.coeff >= 1.0:
            raise ValueError("small-gain condition fails (gamma12 o gamma21 >= id)")
        if math.isclose(upper.exponent, gamma21.exponent, rel_tol=1e-12):
            candidate = PowerGain(math.sqrt(gamma21.coeff * upper.coeff), gamma21.exponent)
        else:
            candidate = None
    if candidate is not None:
        path = checked(candidate)
        if path is not None:
            return path
    return _search_sigma2(gamma12, gamma21, checked)


def _search_sigma2(gamma12: PowerGain, gamma21: PowerGain, checked) -> OmegaPath:
    exps = [g.exponent for g in (gamma21, invert(gamma12) if not gamma12.is_zero else None) if g is not None]
    lo, hi = min(exps), max(exps)
    for p in np.unique(np.concatenate([[lo, hi], np.linspace(lo, hi, 21)])):
        for c in np.logspace(-12, 12, 481):
            path = checked(PowerGain(float(c), float(p)))
            if path is not None:
                return path
    raise ValueError("small-gain condition fails: no sigma_2 found between gamma21 and gamma12^{-1}")


def path_budgets(coeffs, s_star, graph: CouplingGraph) -> np.ndarray:
    """Per-row slack ``sqrt(s_i) - sum_{j in (Sigma(i) | C(i)) - {i}} G_ij sqrt(s_j)``."""
    G = np.asarray(coeffs, dtype=float)
    root = np.sqrt(np.asarray(s_star, dtype=float))
    budgets = np.empty(G.shape[0])
    for i in range(G.shape[0]):
        neighbours = (set(graph.sigma_sets[i]) | set(graph.c_sets[i])) - {i}
        budgets[i] = root[i] - sum(G[i, j] * root[j] for j in neighbours)
    return budgets


def build_phi_linear(coeffs, s_star, graph: CouplingGraph) -> PhiMap:
    """Split each row's slack uniformly: ``phi_ij(r) = budget_i (1 - 1e-6) / |C(i)| * sqrt(r)``."""
    budgets = path_budgets(coeffs, s_star, graph)
    n = len(budgets)
    rows = []
    for i in range(n):
        c_set = graph.c_sets[i]
        if c_set and budgets[i] <= 0:
            raise ValueError(f"path budget exhausted for subsystem {i}; rebuild path with smaller epsilon")
        coeff = budgets[i] * (1.0 - PHI_SHRINK) / len(c_set) if c_set else 0.0
        rows.append(tuple(GainExpr.of(PowerGain(coeff if j in c_set else 0.0, 0.5)) for j in range(n)))
    return PhiMap(tuple(rows))
