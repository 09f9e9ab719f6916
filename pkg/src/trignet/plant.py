"""Interconnected plant models, their Lyapunov data and ISS gains."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from .gainalg import CouplingGraph, GainExpr, GainMatrix, MAFKind, PowerGain, spectral_radius
from .omega import (
    OmegaPath,
    PathProvenance,
    PhiMap,
    build_omega_path_linear,
    build_phi_linear,
    choose_sigma2_twobody,
    verify_omega_condition,
)

HURWITZ_TOL = 1e-12
MAX_ATTEMPTS = 100_000


def _offsets(sizes) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def solve_lyapunov(Abar_ii, Q) -> np.ndarray:
    """Solve ``Abar' P + P Abar = -Q`` for symmetric positive definite ``P``."""
    A = np.atleast_2d(np.asarray(Abar_ii, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if A.shape[0] != A.shape[1] or Q.shape != A.shape:
        raise ValueError(f"shape mismatch: Abar {A.shape}, Q {Q.shape}")
    if np.max(np.linalg.eigvals(A).real) >= -HURWITZ_TOL:
        raise ValueError("stabilize first: Abar_ii must be Hurwitz")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ValueError("Q must be symmetric")
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise ValueError("Q must be positive definite") from None
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(A.T @ P + P @ A + Q, "fro")
    if residual > 1e-8 * np.linalg.norm(Q, "fro"):
        raise ValueError(f"Lyapunov residual {residual:.3g} too large (ill-conditioned Abar_ii)")
    np.linalg.cholesky(P)
    return P


@dataclass(frozen=True)
class LyapunovData:
    """Quadratic ``V_i(x_i) = x_i' P_i x_i`` with sandwich bounds and decrease rate."""

    P: tuple[np.ndarray, ...]
    alpha_lower: tuple[PowerGain, ...]
    alpha_upper: tuple[PowerGain, ...]
    decay: tuple[PowerGain, ...]

    @property
    def n(self) -> int:
        return len(self.P)

    def V_i(self, i: int, x_i) -> float:
        x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
        return float(x_i @ self.P[i] @ x_i)

    def values(self, x, offsets) -> np.ndarray:
        return np.array([self.V_i(i, x[offsets[i]:offsets[i + 1]]) for i in range(self.n)])

    @classmethod
    def from_P(cls, P, decay) -> "LyapunovData":
        P = tuple(np.atleast_2d(np.asarray(p, dtype=float)) for p in P)
        eig = [np.linalg.eigvalsh(p) for p in P]
        return cls(P, tuple(PowerGain(e[0], 2.0) for e in eig), tuple(PowerGain(e[-1], 2.0) for e in eig),
                   tuple(decay))


@dataclass(frozen=True, eq=False)
class LinearPlant:
    """``x_i' = sum_j A_ij x_j + B_i u_i`` with ``u_i = sum_j K_ij xhat_j``.

    ``A`` and ``K`` are stored as full block matrices; ``B`` as one block per
    subsystem.  ``Abar = A + B K`` and ``Bbar = B K`` are derived, as are the
    Lyapunov matrices ``P_i`` of the diagonal blocks.
    """

    A: np.ndarray
    B: tuple[np.ndarray, ...]
    K: np.ndarray
    Q: tuple[np.ndarray, ...] | None = None
    c_tilde: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)
    dims: tuple[int, ...] = field(init=False)
    inputs: tuple[int, ...] = field(init=False)
    offsets: np.ndarray = field(init=False, repr=False)
    Abar: np.ndarray = field(init=False, repr=False)
    Bbar: np.ndarray = field(init=False, repr=False)
    P: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        B = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.B)
        if not B:
            raise ValueError("B: need at least one subsystem")
        dims = tuple(b.shape[0] for b in B)
        inputs = tuple(b.shape[1] for b in B)
        n_x, n_u = sum(dims), sum(inputs)
        A = np.asarray(self.A, dtype=float)
        K = np.asarray(self.K, dtype=float)
        if A.shape != (n_x, n_x):
            raise ValueError(f"A: expected shape {(n_x, n_x)}, got {A.shape}")
        if K.shape != (n_u, n_x):
            raise ValueError(f"K: expected shape {(n_u, n_x)}, got {K.shape}")
        for name, m in (("A", A), ("K", K)) + tuple((f"B[{i}]", b) for i, b in enumerate(B)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name}: entries must be finite")
        n = len(B)
        if self.Q is None:
            Q = tuple(np.eye(d) for d in dims)
        else:
            Q = tuple(np.atleast_2d(np.asarray(q, dtype=float)) for q in self.Q)
        if len(Q) != n or any(q.shape != (d, d) for q, d in zip(Q, dims)):
            raise ValueError("Q: need one square block per subsystem matching its dimension")
        c = np.array([np.linalg.eigvalsh(q)[0] for q in Q])
        c_tilde = c / 2.0 if self.c_tilde is None else np.asarray(self.c_tilde, dtype=float).reshape(-1)
        if c_tilde.shape != (n,):
            raise ValueError(f"c_tilde: expected {n} values")
        if np.any(c_tilde <= 0) or np.any(c_tilde >= c):
            raise ValueError("c_tilde: need 0 < c_tilde_i < lambda_min(Q_i)")
        Bfull = scipy.linalg.block_diag(*B)
        offsets = _offsets(dims)
        Abar = A + Bfull @ K
        Bbar = Bfull @ K
        P = []
        for i in range(n):
            sl = slice(offsets[i], offsets[i + 1])
            try:
                P.append(solve_lyapunov(Abar[sl, sl], Q[i]))
            except ValueError as exc:
                raise ValueError(f"K: subsystem {i}: {exc}") from None
        for arr in (A, K, Abar, Bbar, offsets, c_tilde, *B, *Q, *P):
            arr.setflags(write=False)
        for name, value in dict(A=A, B=B, K=K, Q=Q, c_tilde=c_tilde, dims=dims, inputs=inputs,
                                offsets=offsets, Abar=Abar, Bbar=Bbar, P=tuple(P)).items():
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def n_state(self) -> int:
        return int(self.offsets[-1])

    @property
    def c(self) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(q)[0] for q in self.Q])

    def block(self, M: np.ndarray, i: int, j: int) -> np.ndarray:
        o = self.offsets
        return M[o[i]:o[i + 1], o[j]:o[j + 1]]

    def rhs(self, x, xhat) -> np.ndarray:
        return self.A @ x + (self.Bbar @ xhat)

    def rescaled(self, c: float) -> "LinearPlant":
        """Same plant with time running ``c`` times faster (``A``, ``B`` scaled by ``c``)."""
        return LinearPlant(self.A * c, tuple(b * c for b in self.B), self.K, self.Q, self.c_tilde, dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LinearPlant):
            return NotImplemented
        return (np.array_equal(self.A, other.A) and np.array_equal(self.K, other.K)
                and len(self.B) == len(other.B)
                and all(np.array_equal(a, b) for a, b in zip(self.B, other.B))
                and all(np.array_equal(a, b) for a, b in zip(self.Q, other.Q))
                and np.array_equal(self.c_tilde, other.c_tilde))

    __hash__ = None


@dataclass(frozen=True)
class NonlinearPlant:
    """Two scalar subsystems ``x1' = x1 x2 - x1^2 xhat1`` and ``x2' = x1^2 - k xhat2``."""

    k: float = 64.0
    dims: tuple[int, ...] = (1, 1)

    @property
    def n(self) -> int:
        return 2

    @property
    def n_state(self) -> int:
        return 2

    @property
    def offsets(self) -> np.ndarray:
        return np.array([0, 1, 2], dtype=np.int64)

    def rhs(self, x, xhat) -> np.ndarray:
        x1, x2 = x
        return np.array([x1 * x2 - x1 * x1 * xhat[0], x1 * x1 - self.k * xhat[1]])


def eval_dynamics(plant: "LinearPlant | NonlinearPlant", x, xhat) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if x.shape != (plant.n_state,) or xhat.shape != x.shape:
        raise ValueError(f"expected state vectors of length {plant.n_state}, got {x.shape} and {xhat.shape}")
    return plant.rhs(x, xhat)


def _spectral_norm(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def coupling_graph(plant: LinearPlant) -> CouplingGraph:
    """``Sigma(i)`` from nonzero ``A_ij`` blocks, ``C(i)`` from nonzero ``Bbar_ij`` blocks."""
    n = plant.n
    nz = lambda M, i, j: bool(np.any(plant.block(M, i, j) != 0))
    adj = np.array([[i != j and nz(plant.Abar, i, j) for j in range(n)] for i in range(n)], dtype=bool)
    sigma = tuple(tuple(j for j in range(n) if j == i or nz(plant.A, i, j)) for i in range(n))
    c_sets = tuple(tuple(j for j in range(n) if nz(plant.Bbar, i, j)) for i in range(n))
    return CouplingGraph(adj, sigma, c_sets)


def linear_gain_coefficients(plant: LinearPlant) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``G_ij`` of ``gamma_ij = G_ij sqrt(r)`` and ``H_ij`` of ``eta_ij = H_ij r``."""
    n = plant.n
    scale = np.array([2.0 * _spectral_norm(plant.P[i]) ** 1.5 / plant.c_tilde[i] for i in range(n)])
    lam_min = np.array([np.linalg.eigvalsh(p)[0] for p in plant.P])
    G = np.zeros((n, n))
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                G[i, j] = scale[i] * _spectral_norm(plant.block(plant.Abar, i, j)) / math.sqrt(lam_min[j])
            H[i, j] = scale[i] * _spectral_norm(plant.block(plant.Bbar, i, j))
    return G, H


def derive_linear_gains(plant: LinearPlant) -> tuple[GainMatrix, tuple[tuple[GainExpr, ...], ...], LyapunovData]:
    G, H = linear_gain_coefficients(plant)
    gains = GainMatrix.from_coefficients(G, 0.5, MAFKind.SUM_THEN_SQUARE)
    eta = tuple(tuple(GainExpr.of(PowerGain(h, 1.0)) for h in row) for row in H)
    decay = tuple(PowerGain(c - ct, 2.0) for c, ct in zip(plant.c, plant.c_tilde))
    return gains, eta, LyapunovData.from_P(plant.P, decay)


class LinearDesign(NamedTuple):
    gains: GainMatrix
    eta: tuple
    sigma: OmegaPath
    phi: PhiMap
    lyap: LyapunovData
    coeffs: np.ndarray
    graph: CouplingGraph


def design_linear(plant: LinearPlant, epsilon: float = 1e-3) -> LinearDesign:
    """Gains, Perron path and uniform error budgets for a linear plant."""
    gains, eta, lyap = derive_linear_gains(plant)
    G, _ = linear_gain_coefficients(plant)
    graph = coupling_graph(plant)
    sigma = build_omega_path_linear(G, epsilon)
    phi = build_phi_linear(G, sigma.s_star, graph)
    report = verify_omega_condition(gains, sigma, phi)
    if not report.verdict:
        raise ValueError(f"path construction failed; decrease epsilon ({report.detail})")
    return LinearDesign(gains, eta, sigma, phi, lyap, G, graph)


def _lqr_gain(A: np.ndarray, B: np.ndarray, weight: float) -> np.ndarray:
    R = weight * np.eye(B.shape[1])
    X = scipy.linalg.solve_continuous_are(A, B, np.eye(A.shape[0]), R)
    return -np.linalg.solve(R, B.T @ X)


def round_robin_decay(plant: LinearPlant, period: float) -> float:
    """Spectral radius of the state map over one full round-robin cycle."""
    N = plant.n_state
    gen = np.zeros((2 * N, 2 * N))
    gen[:N, :N] = plant.A
    gen[:N, N:] = plant.Bbar
    with np.errstate(all="ignore"):
        step = scipy.linalg.expm(gen * period)
        cycle = np.eye(2 * N)
        for i in range(plant.n):
            refresh = np.eye(2 * N)
            sl = slice(N + plant.offsets[i], N + plant.offsets[i + 1])
            refresh[sl, :] = 0.0
            refresh[sl, plant.offsets[i]:plant.offsets[i + 1]] = np.eye(plant.dims[i])
            cycle = refresh @ step @ cycle
        if not np.all(np.isfinite(cycle)):
            return math.inf
        return float(np.max(np.abs(np.linalg.eigvals(cycle))))


def calibrate_time_scale(plant: LinearPlant, period: float = 3.0) -> float:
    """Time scale ``c`` for which the round-robin baseline with ``period`` contracts fastest.

    Scaling ``A`` and ``B`` by ``c`` keeps the gain matrix and path, scales
    ``V`` and the thresholds by ``1/c`` alike and so only stretches time in the
    triggered loop.  ``c`` is therefore the one free parameter linking the
    plant to the sampling period.
    """
    def objective(log_c: float) -> float:
        rho = round_robin_decay(plant.rescaled(10.0 ** log_c), period)
        return math.log(rho) if 0 < rho < math.inf else 1e3

    grid = np.linspace(-8.0, 2.0, 201)
    values = [objective(v) for v in grid]
    best = grid[int(np.argmin(values))]
    res = minimize_scalar(objective, bounds=(best - 0.05, best + 0.05), method="bounded",
                          options={"xatol": 1e-6})
    return float(10.0 ** (res.x if res.fun <= min(values) else best))


def generate_random_system(n: int, dim: int, seed: int, bound: float = 5.0, *,
                           control_weight: float = 1e-4, dense_k: bool = False,
                           coupling_k: float = 0.1, time_scale: "float | str" = "auto",
                           period: float = 3.0, max_attempts: int = MAX_ATTEMPTS) -> LinearPlant:
    """Random interconnection certified by the small-gain pipeline.

    ``A`` and ``B_i`` (square, ``dim`` inputs) are uniform on
    ``(-bound, bound)``; ``K_ii`` is the LQR gain with state weight ``I`` and
    input weight ``control_weight * I``.  Draws are rejected until the gain
    matrix has spectral radius below one and the path/budget construction
    verifies.  With ``time_scale="auto"`` the accepted plant is rescaled in time
    so that the round-robin baseline with ``period`` contracts fastest.
    """
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    rng = np.random.default_rng(seed)
    N = n * dim
    for attempt in range(1, max_attempts + 1):
        A = rng.uniform(-bound, bound, (N, N))
        B = [rng.uniform(-bound, bound, (dim, dim)) for _ in range(n)]
        K = rng.uniform(-coupling_k, coupling_k, (N, N)) if dense_k else np.zeros((N, N))
        try:
            for i in range(n):
                sl = slice(i * dim, (i + 1) * dim)
                K[sl, sl] = _lqr_gain(A[sl, sl], B[i], control_weight)
            plant = LinearPlant(A, tuple(B), K, None, None)
            G, _ = linear_gain_coefficients(plant)
            if spectral_radius(G) >= 1.0:
                continue
            design_linear(plant)
        except (ValueError, np.linalg.LinAlgError):
            continue
        meta = dict(seed=int(seed), bound=float(bound), attempts=attempt, control_weight=control_weight,
                    dense_k=bool(dense_k), spectral_radius=float(spectral_radius(G)))
        if time_scale == "auto":
            scale = calibrate_time_scale(plant, period)
        else:
            scale = float(time_scale)
        if scale <= 0:
            raise ValueError("time_scale must be positive")
        meta["time_scale"] = scale
        out = plant.rescaled(scale) if scale != 1.0 else plant
        return LinearPlant(out.A, out.B, out.K, out.Q, out.c_tilde, meta)
    raise ValueError("no small-gain instance found; loosen bound or dims")


def random_initial_state(plant, seed: int, bound: float = 5.0) -> np.ndarray:
    """Initial state uniform on ``(-bound, bound)``, independent of the plant draw."""
    return np.random.default_rng([int(seed), 1]).uniform(-bound, bound, plant.n_state)


class NonlinearExample(NamedTuple):
    plant: NonlinearPlant
    gains: GainMatrix
    eta: tuple
    sigma: OmegaPath
    phi: PhiMap
    lyap: LyapunovData


def builtin_nonlinear_example(k: float = 64.0, sigma_bar_sq: "float | str" = "auto") -> NonlinearExample:
    """Two scalar subsystems with quadratic Lyapunov functions ``x_i^2 / 2``.

    Gains: ``gamma12 = sqrt(32 r)``, ``gamma21 = (32/k^2) r^2`` (max rows),
    ``eta11 = 2 r^2``, ``eta22 = 8 r^2``.  The path is ``(id, sb2 * r^2)`` with
    ``sb2`` strictly between ``32/k^2`` and ``1/32``.
    """
    k = float(k)
    if not k > 32.0:
        raise ValueError("small-gain condition requires k>32")
    zero = GainExpr.zero()
    gamma12 = PowerGain(math.sqrt(32.0), 0.5)
    gamma21 = PowerGain(32.0 / k ** 2, 2.0)
    gains = GainMatrix(((zero, GainExpr.of(gamma12)), (GainExpr.of(gamma21), zero)), (MAFKind.MAX, MAFKind.MAX))
    eta = ((GainExpr.of(PowerGain(2.0, 2.0)), zero), (zero, GainExpr.of(PowerGain(8.0, 2.0))))
    if sigma_bar_sq == "auto":
        sigma = choose_sigma2_twobody(gamma12, gamma21)
        sb2 = sigma.sigma[1].coeff
    else:
        sb2 = float(sigma_bar_sq)
        if not 32.0 / k ** 2 < sb2 < 1.0 / 32.0:
            raise ValueError(f"sigma_bar_sq must lie in ({32.0 / k ** 2:.6g}, {1.0 / 32.0:.6g})")
        sigma = OmegaPath((PowerGain.identity(), PowerGain(sb2, 2.0)), PathProvenance.USER)
    phi = PhiMap(((GainExpr.of(PowerGain(math.sqrt(32.0 * sb2), 1.0)), zero),
                  (zero, GainExpr.of(PowerGain(32.0 / k ** 2, 2.0)))))
    report = verify_omega_condition(gains, sigma, phi)
    if not report.verdict:
        raise ValueError(f"path construction failed ({report.detail})")
    lyap = LyapunovData.from_P([[[0.5]], [[0.5]]], (PowerGain(0.25, 4.0), PowerGain(k / 2.0, 2.0)))
    return NonlinearExample(NonlinearPlant(k), gains, eta, sigma, phi, lyap)
