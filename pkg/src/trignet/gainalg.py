"""Gain functions, aggregation functions and small-gain checks.

Every gain is a finite maximum of scaled powers ``r -> a * r**p``.  This family
is closed under composition, inversion of single terms and pointwise maxima,
which is all the threshold constructions need.
"""
from __future__ import annotations

import enum
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GRID_LOW = 1e-6
GRID_HIGH = 1e6
GRID_POINTS_DEFAULT = 100
GRID_MARGIN = 1e-9


def log_grid(points: int | None = None) -> np.ndarray:
    """Verification grid on ``[1e-6, 1e6]``.

    The point count comes from ``TRIGNET_GRID_POINTS`` when not given.
    """
    if points is None:
        raw = os.environ.get("TRIGNET_GRID_POINTS")
        points = int(raw) if raw else GRID_POINTS_DEFAULT
    if points < 2:
        raise ValueError("grid needs at least 2 points")
    return np.logspace(math.log10(GRID_LOW), math.log10(GRID_HIGH), points)


@dataclass(frozen=True)
class PowerGain:
    """The function ``r -> coeff * r**exponent``; ``coeff == 0`` is the zero gain."""

    coeff: float
    exponent: float = 1.0

    def __post_init__(self):
        coeff, exponent = float(self.coeff), float(self.exponent)
        if not (math.isfinite(coeff) and coeff >= 0.0):
            raise ValueError(f"gain coefficient must be finite and >= 0, got {self.coeff}")
        if not (math.isfinite(exponent) and exponent > 0.0):
            raise ValueError(f"gain exponent must be finite and > 0, got {self.exponent}")
        object.__setattr__(self, "coeff", coeff)
        object.__setattr__(self, "exponent", exponent)

    @classmethod
    def zero(cls) -> "PowerGain":
        return cls(0.0, 1.0)

    @classmethod
    def identity(cls) -> "PowerGain":
        return cls(1.0, 1.0)

    @property
    def is_zero(self) -> bool:
        return self.coeff == 0.0

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.is_zero:
            return np.zeros_like(r)[()]
        return (self.coeff * np.power(r, self.exponent))[()]

    def __str__(self) -> str:
        if self.is_zero:
            return "0"
        return f"{self.coeff:.6g}*r^{self.exponent:.6g}"


def compose(outer: PowerGain, inner: PowerGain) -> PowerGain:
    """``outer o inner``; the zero gain absorbs on either side."""
    if outer.is_zero or inner.is_zero:
        return PowerGain.zero()
    return PowerGain(outer.coeff * inner.coeff ** outer.exponent, outer.exponent * inner.exponent)


def invert(g: PowerGain) -> PowerGain:
    if g.is_zero:
        raise ValueError("non-invertible gain")
    return PowerGain(g.coeff ** (-1.0 / g.exponent), 1.0 / g.exponent)


def _as_terms(items: Iterable["PowerGain | GainExpr"]) -> list[PowerGain]:
    terms: list[PowerGain] = []
    for item in items:
        if isinstance(item, GainExpr):
            terms.extend(item.terms)
        elif isinstance(item, PowerGain):
            if not item.is_zero:
                terms.append(item)
        else:
            raise TypeError(f"expected PowerGain or GainExpr, got {type(item).__name__}")
    return terms


@dataclass(frozen=True)
class GainExpr:
    """Pointwise maximum of power gains; no terms means the zero function.

    Terms sharing an exponent are merged (keeping the largest coefficient), so
    e.g. a maximum of quadratics stays a single invertible quadratic.
    """

    terms: tuple[PowerGain, ...] = ()

    def __post_init__(self):
        merged: dict[float, float] = {}
        for term in _as_terms(self.terms):
            merged[term.exponent] = max(merged.get(term.exponent, 0.0), term.coeff)
        terms = tuple(PowerGain(c, p) for p, c in sorted(merged.items()))
        object.__setattr__(self, "terms", terms)

    @classmethod
    def of(cls, *items: "PowerGain | GainExpr") -> "GainExpr":
        return cls(tuple(_as_terms(items)))

    @classmethod
    def zero(cls) -> "GainExpr":
        return cls(())

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_single(self) -> bool:
        return len(self.terms) == 1

    def single(self) -> PowerGain:
        """The unique term; raises unless the expression is a single power."""
        if not self.is_single:
            raise ValueError(f"expected a single power term, got {self}")
        return self.terms[0]

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for term in self.terms:
            out = np.maximum(out, term(r))
        return out[()]

    def inverse(self) -> "GainExpr":
        if self.is_zero:
            raise ValueError("non-invertible gain")
        return GainExpr.of(invert(self.single()))

    def compose(self, inner: "GainExpr | PowerGain") -> "GainExpr":
        """``self o inner``; max distributes over composition with increasing outers."""
        inner_terms = _as_terms([inner])
        return GainExpr.of(*(compose(a, b) for a in self.terms for b in inner_terms))

    def __str__(self) -> str:
        if self.is_zero:
            return "0"
        if self.is_single:
            return str(self.terms[0])
        return "max(" + ", ".join(str(t) for t in self.terms) + ")"


def as_expr(g: "PowerGain | GainExpr | None") -> GainExpr:
    if g is None:
        return GainExpr.zero()
    if isinstance(g, GainExpr):
        return g
    return GainExpr.of(g)


class MAFKind(enum.Enum):
    """Monotone aggregation functions supported by the gain algebra."""

    MAX = "max"
    SUM_THEN_SQUARE = "sum_then_square"

    def aggregate(self, values, axis: int = -1):
        values = np.asarray(values, dtype=float)
        if self is MAFKind.MAX:
            if values.shape[axis] == 0:
                return np.zeros(np.delete(values.shape, axis))
            return values.max(axis=axis)
        return values.sum(axis=axis) ** 2


@dataclass(frozen=True)
class GainMatrix:
    """``n x n`` gains with zero diagonal and one aggregation function per row."""

    entries: tuple[tuple[GainExpr, ...], ...]
    row_maf: tuple[MAFKind, ...]

    def __post_init__(self):
        entries = tuple(tuple(as_expr(g) for g in row) for row in self.entries)
        n = len(entries)
        if any(len(row) != n for row in entries):
            raise ValueError("gain matrix must be square")
        if len(self.row_maf) != n:
            raise ValueError(f"need {n} row aggregation functions, got {len(self.row_maf)}")
        for i in range(n):
            if not entries[i][i].is_zero:
                raise ValueError(f"diagonal gain gamma[{i}][{i}] must be zero")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "row_maf", tuple(MAFKind(m) for m in self.row_maf))

    @property
    def n(self) -> int:
        return len(self.entries)

    @classmethod
    def from_coefficients(cls, coeffs, exponent: float = 0.5,
                          maf: MAFKind = MAFKind.SUM_THEN_SQUARE) -> "GainMatrix":
        """Homogeneous matrix ``gamma_ij(r) = coeffs[i, j] * r**exponent``."""
        coeffs = np.asarray(coeffs, dtype=float)
        n = coeffs.shape[0]
        entries = tuple(
            tuple(GainExpr.of(PowerGain(coeffs[i, j] if i != j else 0.0, exponent)) for j in range(n))
            for i in range(n)
        )
        return cls(entries, (maf,) * n)

    def adjacency(self) -> np.ndarray:
        return np.array([[not g.is_zero for g in row] for row in self.entries], dtype=bool).reshape(self.n, self.n)

    def apply(self, s) -> np.ndarray:
        return gamma_mu_apply(self, s)


def gamma_mu_apply(G: GainMatrix, s) -> np.ndarray:
    """Componentwise ``mu_i(gamma_i1(s_1), ..., gamma_iN(s_N))``.

    ``s`` may carry extra trailing axes (e.g. one column per grid point).
    """
    s = np.asarray(s, dtype=float)
    if s.shape[:1] != (G.n,):
        raise ValueError(f"expected vector of length {G.n}, got shape {s.shape}")
    if np.any(s < 0):
        raise ValueError("gamma_mu_apply needs a nonnegative vector")
    out = np.empty_like(s)
    for i, row in enumerate(G.entries):
        vals = np.stack([g(s[j]) for j, g in enumerate(row)], axis=0)
        out[i] = G.row_maf[i].aggregate(vals, axis=0)
    return out


@dataclass(frozen=True)
class CouplingGraph:
    """Interconnection structure.

    ``adjacency[i, j]`` is true when subsystem ``j`` influences ``i`` through a
    nonzero gain.  ``sigma_sets[i]`` lists the states ``f_i`` depends on,
    ``c_sets[i]`` the subsystems whose errors enter ``i``'s controller and
    ``z_sets[j]`` the subsystems listening to ``j`` (so ``j in C(i)`` iff
    ``i in Z(j)``).
    """

    adjacency: np.ndarray
    sigma_sets: tuple[tuple[int, ...], ...]
    c_sets: tuple[tuple[int, ...], ...]
    z_sets: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=bool)
        n = adj.shape[0]
        if adj.shape != (n, n):
            raise ValueError("adjacency must be square")
        if np.any(np.diag(adj)):
            raise ValueError("adjacency must have an empty diagonal")
        c_sets = tuple(tuple(sorted(set(map(int, c)))) for c in self.c_sets)
        sigma_sets = tuple(tuple(sorted(set(map(int, s)))) for s in self.sigma_sets)
        if len(c_sets) != n or len(sigma_sets) != n:
            raise ValueError("one Sigma and one C set per subsystem")
        z_sets = tuple(tuple(i for i in range(n) if j in c_sets[i]) for j in range(n))
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "sigma_sets", sigma_sets)
        object.__setattr__(self, "c_sets", c_sets)
        object.__setattr__(self, "z_sets", z_sets)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_gains(cls, G: GainMatrix, eta: Sequence[Sequence[GainExpr]] | None = None) -> "CouplingGraph":
        """Derive the sets from nonzero gain patterns; ``C(i)`` from the error gains."""
        adj = G.adjacency()
        n = G.n
        sigma = tuple(tuple([i] + [j for j in range(n) if adj[i, j]]) for i in range(n))
        if eta is None:
            c_sets = tuple((i,) for i in range(n))
        else:
            c_sets = tuple(tuple(j for j in range(n) if not as_expr(eta[i][j]).is_zero) for i in range(n))
        return cls(adj, sigma, c_sets)


def strongly_connected_components(adjacency) -> list[list[int]]:
    """Tarjan's algorithm (iterative) on the digraph with edge ``i -> j`` when ``adjacency[i, j]``.

    Components come out in reverse topological order.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    succ = [np.flatnonzero(adj[i]).tolist() for i in range(n)]
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    components: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] >= 0:
            continue
        work = [(root, 0)]
        while work:
            v, pos = work.pop()
            if pos == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            recurse = False
            for k in range(pos, len(succ[v])):
                w = succ[v][k]
                if index[w] < 0:
                    work.append((v, k + 1))
                    work.append((w, 0))
                    recurse = True
                    break
                if on_stack[w]:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                components.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return components


def is_irreducible(graph: "CouplingGraph | np.ndarray") -> bool:
    adj = graph.adjacency if isinstance(graph, CouplingGraph) else np.asarray(graph, dtype=bool)
    return len(strongly_connected_components(adj)) == 1


def _perron_block(B: np.ndarray, tol: float = 1e-13, max_iter: int = 200_000) -> tuple[float, np.ndarray]:
    """Perron root and vector of an irreducible nonnegative block.

    Power iteration on ``B + s*I`` (the shift removes periodicity) with the
    Collatz-Wielandt bracket ``min(Bx/x) <= rho <= max(Bx/x)`` as stopping rule.
    """
    m = B.shape[0]
    shift = 0.5 * B.sum(axis=1).max()
    x = np.ones(m)
    for _ in range(max_iter):
        y = B @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * hi:
            return 0.5 * (lo + hi), x / x.max()
        x = y + shift * x
        x /= x.max()
    warnings.warn("power iteration did not converge; falling back to dense eigensolver", RuntimeWarning)
    w, vecs = np.linalg.eig(B)
    k = int(np.argmax(w.real))
    v = np.abs(vecs[:, k].real)
    return float(np.max(np.abs(w))), v / v.max()


def _check_nonnegative_square(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if np.any(M < 0) or not np.all(np.isfinite(M)):
        raise ValueError("expected a finite nonnegative matrix")
    return M


def spectral_radius(M) -> float:
    """Spectral radius of a nonnegative matrix.

    Reducible matrices are split into strongly connected blocks; the radius is
    the largest Perron root among the diagonal blocks.
    """
    M = _check_nonnegative_square(M)
    if M.size == 0:
        return 0.0
    rho = 0.0
    for comp in strongly_connected_components(M > 0):
        if len(comp) == 1:
            rho = max(rho, M[comp[0], comp[0]])
        else:
            rho = max(rho, _perron_block(M[np.ix_(comp, comp)])[0])
    return float(rho)


def perron_vector(M) -> tuple[float, np.ndarray]:
    """Perron root and positive eigenvector (max entry 1) of an irreducible nonnegative matrix."""
    M = _check_nonnegative_square(M)
    if not is_irreducible(M > 0) and M.shape[0] > 1:
        raise ValueError("Perron vector requires an irreducible matrix")
    if M.shape[0] == 1:
        return float(M[0, 0]), np.ones(1)
    rho, v = _perron_block(M)
    return float(rho), v


@dataclass(frozen=True)
class CheckReport:
    """Outcome of a small-gain or path check.

    ``witness`` is the quantity the verdict rests on (a spectral radius, a sup
    of a cycle ratio, or a worst relative margin); ``violation`` locates the
    first failing ``(row, r)`` pair when there is one.
    """

    verdict: bool
    method: str
    witness: float
    detail: str = ""
    violation: tuple[int, float] | None = None


def _homogeneous_sqrt_coefficients(G: GainMatrix) -> np.ndarray | None:
    if any(m is not MAFKind.SUM_THEN_SQUARE for m in G.row_maf):
        return None
    coeffs = np.zeros((G.n, G.n))
    for i, row in enumerate(G.entries):
        for j, g in enumerate(row):
            if g.is_zero:
                continue
            if not g.is_single or abs(g.terms[0].exponent - 0.5) > 1e-12:
                return None
            coeffs[i, j] = g.terms[0].coeff
    return coeffs


def cycle_ratio(gamma12: GainExpr, gamma21: GainExpr, grid: np.ndarray | None = None) -> tuple[bool, float, str]:
    """Decide ``gamma12 o gamma21 < id``; exact for a single linear composite, sampled otherwise."""
    cycle = as_expr(gamma12).compose(as_expr(gamma21))
    if cycle.is_zero:
        return True, 0.0, "cycle gain is zero"
    if cycle.is_single and cycle.terms[0].exponent == 1.0:
        c = cycle.terms[0].coeff
        return c < 1.0, c, f"cycle gain {cycle} is linear"
    grid = log_grid() if grid is None else grid
    ratio = cycle(grid) / grid
    sup = float(ratio.max())
    return bool(np.all(ratio < 1.0 - GRID_MARGIN)), sup, f"cycle gain {cycle} sampled on grid"


def small_gain_check(G: GainMatrix) -> CheckReport:
    """Closed-form small-gain check for the supported homogeneous structures.

    Square-root gains with sum-then-square rows reduce to a spectral radius
    test on the coefficient matrix; two subsystems with max rows reduce to the
    cycle ``gamma12 o gamma21 < id``.
    """
    if all(g.is_zero for row in G.entries for g in row):
        return CheckReport(True, "trivial", 0.0, "all coupling gains are zero")
    coeffs = _homogeneous_sqrt_coefficients(G)
    if coeffs is not None:
        rho = spectral_radius(coeffs)
        return CheckReport(rho < 1.0, "spectral", rho, f"spectral radius of coefficient matrix = {rho:.12g}")
    if G.n == 2 and all(m is MAFKind.MAX for m in G.row_maf):
        ok, witness, detail = cycle_ratio(G.entries[0][1], G.entries[1][0])
        return CheckReport(ok, "cycle", witness, detail)
    raise ValueError("no closed-form check; use verify_omega_condition with a user-supplied path")
