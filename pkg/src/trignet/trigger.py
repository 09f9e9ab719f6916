"""Triggering thresholds and the basic, practical and parsimonious trigger functions."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gainalg import GainExpr, GainMatrix, as_expr, compose
from .omega import OmegaPath, PhiMap
from .plant import (
    LinearPlant,
    LyapunovData,
    NonlinearExample,
    NonlinearPlant,
    builtin_nonlinear_example,
    design_linear,
)


@dataclass(frozen=True)
class ThresholdSet:
    """Per-subsystem threshold gains.

    ``chi_i = sigma_i o eta_hat_i`` drives the basic trigger, ``eta_hat_i`` the
    practical one and ``psi_i`` converts the local error into a bound on the
    other subsystems' states for the parsimonious one.  ``c`` holds the
    practical constants and ``c_hat`` the size of the resulting target set.
    """

    chi: tuple[GainExpr, ...]
    eta_hat: tuple[GainExpr, ...]
    psi: tuple[GainExpr, ...]
    c: np.ndarray
    c_hat: float

    @property
    def n(self) -> int:
        return len(self.chi)


def compute_thresholds(G: GainMatrix, eta: Sequence[Sequence[GainExpr]], sigma: OmegaPath, phi: PhiMap,
                       lyap: LyapunovData, c=None) -> ThresholdSet:
    n = G.n
    eta = [[as_expr(g) for g in row] for row in eta]
    eta_hat = []
    for j in range(n):
        terms = []
        for i in range(n):
            if eta[i][j].is_zero:
                continue
            if phi.phi[i][j].is_zero:
                raise ValueError(f"phi[{i}][{j}] is zero but eta[{i}][{j}] is not; cannot build threshold")
            terms.append(phi.phi[i][j].inverse().compose(eta[i][j]))
        eta_hat.append(GainExpr.of(*terms))
    chi = tuple(GainExpr.of(sigma.sigma[j]).compose(eta_hat[j]) for j in range(n))
    psi = tuple(
        GainExpr.of(*(compose(sigma.inverse(i), lyap.alpha_lower[i]) for i in range(n) if i != j))
        for j in range(n)
    )
    c = np.zeros(n) if c is None else np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("practical constants must be finite and >= 0")
    c_hat = float(max(max(ci, float(sigma.inverse(i)(ci))) for i, ci in enumerate(c)))
    c.setflags(write=False)
    return ThresholdSet(chi, tuple(eta_hat), psi, c, c_hat)


def eval_basic(ts: ThresholdSet, lyap: LyapunovData, i: int, x_i, e_i) -> float:
    """``chi_i(|e_i|) - V_i(x_i)``; the subsystem broadcasts when this is >= 0."""
    return float(ts.chi[i](np.linalg.norm(e_i))) - lyap.V_i(i, x_i)


def eval_practical(ts: ThresholdSet, sigma: OmegaPath, lyap: LyapunovData, i: int, x_i, e_i) -> float:
    """``eta_hat_i(|e_i|) - max(sigma_i^{-1}(V_i(x_i)), c_i)``."""
    if ts.c[i] <= 0:
        raise ValueError("practical scheme requires positive constants")
    level = max(float(sigma.inverse(i)(lyap.V_i(i, x_i))), float(ts.c[i]))
    return float(ts.eta_hat[i](np.linalg.norm(e_i))) - level


@dataclass
class QuotientState:
    """Difference quotient ``d_i = |x_i(t) - x_i(t_prev)| / (t - t_prev)`` per subsystem.

    ``t_prev`` and the snapshot refer to the subsystem's last own broadcast
    (initially the start of the run).
    """

    t_prev: np.ndarray
    snapshot: list[np.ndarray]
    d: np.ndarray = field(default=None)

    def __post_init__(self):
        self.t_prev = np.asarray(self.t_prev, dtype=float).copy()
        self.snapshot = [np.atleast_1d(np.asarray(s, dtype=float)).copy() for s in self.snapshot]
        if self.d is None:
            self.d = np.zeros(len(self.snapshot))

    @classmethod
    def start(cls, t0: float, x0_blocks: Sequence) -> "QuotientState":
        return cls(np.full(len(x0_blocks), float(t0)), list(x0_blocks))


def update_d(qs: QuotientState, i: int, t: float, x_i, triggered: bool = False) -> float:
    """Refresh ``d_i`` at time ``t``; roll the snapshot forward when ``i`` broadcasts."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    if t <= qs.t_prev[i]:
        raise ValueError(f"time {t} not after previous trigger time {qs.t_prev[i]}")
    d = float(np.linalg.norm(x_i - qs.snapshot[i]) / (t - qs.t_prev[i]))
    qs.d[i] = d
    if triggered:
        qs.t_prev[i] = t
        qs.snapshot[i] = x_i.copy()
    return d


def derivative_gap(xdot_norm: float, d: float, kappa: float, x_norm: float) -> float:
    """Residual ``| |xdot_i| - d_i | - kappa_i |x_i|``; positive values break the quotient assumption."""
    return abs(xdot_norm - d) - kappa * x_norm


@dataclass(frozen=True)
class ThetaBound:
    """Linear bound ``|f_j| <= sum_k coeffs[j, k] |x_k| + local[j] |e_j|``.

    It is valid whenever every other subsystem ``i`` keeps
    ``V(x) >= eta_hat_i(|e_i|)``.  ``kappa`` is the slack allowed between the
    difference quotient and the true derivative norm.
    """

    coeffs: np.ndarray
    local: np.ndarray
    kappa: np.ndarray

    @property
    def lipschitz(self) -> np.ndarray:
        return self.coeffs.sum(axis=1)


def build_theta_linear(plant: LinearPlant, ts: ThresholdSet, sigma: OmegaPath, lyap: LyapunovData,
                       kappa=None) -> ThetaBound:
    n = plant.n
    s = sigma.s_star
    if s is None:
        raise ValueError("parsimonious scheme needs a linear path")
    norm = lambda M, i, j: float(np.linalg.norm(plant.block(M, i, j), 2))
    g = np.sqrt(np.array([a.coeff for a in lyap.alpha_upper]) / s)
    beta = np.zeros(n)
    for i in range(n):
        if ts.eta_hat[i].is_zero:
            continue
        h = ts.eta_hat[i].single()
        if h.exponent != 2.0:
            raise ValueError("parsimonious scheme needs quadratic eta_hat thresholds")
        beta[i] = 1.0 / math.sqrt(h.coeff)
    coeffs = np.zeros((n, n))
    for j in range(n):
        foreign = 0.0
        for i in range(n):
            if i != j:
                b = norm(plant.Bbar, j, i)
                if b and ts.eta_hat[i].is_zero:
                    raise ValueError(f"error of subsystem {i} enters {j} but is never bounded")
                foreign += b * beta[i]
        for k in range(n):
            coeffs[j, k] = norm(plant.Abar, j, k) + foreign * g[k]
    local = np.array([norm(plant.Bbar, j, j) for j in range(n)])
    kappa = np.zeros(n) if kappa is None else np.broadcast_to(np.asarray(kappa, dtype=float), (n,)).copy()
    if np.any(kappa < 0):
        raise ValueError("kappa must be >= 0")
    for arr in (coeffs, local, kappa):
        arr.setflags(write=False)
    return ThetaBound(coeffs, local, kappa)


def compute_W(theta: ThetaBound, j: int, x_j, e_j_norm: float, d_j: float) -> float:
    """Smallest ``max_{k != j} |x_k|`` consistent with the observed quotient ``d_j``.

    The constraint ``sum_{k != j} c_jk |x_k| >= rest`` is linear, so the
    min-max is attained with all foreign norms equal.
    """
    off = float(theta.coeffs[j].sum() - theta.coeffs[j, j])
    if off <= 0.0:
        warnings.warn("subsystem decoupled; T2 vacuous", RuntimeWarning, stacklevel=2)
        return 0.0
    x_norm = float(np.linalg.norm(x_j))
    rest = d_j - theta.kappa[j] * x_norm - theta.coeffs[j, j] * x_norm - theta.local[j] * e_j_norm
    return max(0.0, rest / off)


def psi_inverse_eta_hat(ts: ThresholdSet, i: int) -> GainExpr | None:
    """``psi_i^{-1} o eta_hat_i``, or ``None`` when the second condition is vacuous."""
    if ts.psi[i].is_zero or ts.eta_hat[i].is_zero:
        return None
    return ts.psi[i].inverse().compose(ts.eta_hat[i])


def eval_parsimonious(ts: ThresholdSet, theta: ThetaBound, lyap: LyapunovData, sigma: OmegaPath, i: int,
                      x_i, e_i, d_i: float) -> float:
    """``min(T_i1, T_i2)`` where ``T_i2 = psi_i^{-1}(eta_hat_i(|e_i|)) - W``.

    ``T_i1`` is the basic trigger; ``T_i2`` is only evaluated when ``T_i1 >= 0``.
    """
    t1 = eval_basic(ts, lyap, i, x_i, e_i)
    if t1 < 0:
        return t1
    inv = psi_inverse_eta_hat(ts, i)
    off = float(theta.coeffs[i].sum() - theta.coeffs[i, i])
    if inv is None or off <= 0.0:
        return t1
    e_norm = float(np.linalg.norm(e_i))
    t2 = float(inv(e_norm)) - compute_W(theta, i, x_i, e_norm, d_i)
    return min(t1, t2)


@dataclass(frozen=True)
class ClosedLoopDesign:
    """Everything a simulation needs besides the plant: gains, path, thresholds and Theta."""

    gains: GainMatrix
    eta: tuple
    sigma: OmegaPath
    phi: PhiMap
    lyap: LyapunovData
    thresholds: ThresholdSet
    theta: ThetaBound | None = None
    coeffs: np.ndarray | None = None


def synthesize(plant: "LinearPlant | NonlinearPlant", practical_c=None, *, epsilon: float = 1e-3,
               kappa=None, example: NonlinearExample | None = None) -> ClosedLoopDesign:
    """Run the full design pipeline for a plant.

    Linear plants get square-root gains, a Perron path, uniform error budgets
    and a Theta bound; the built-in nonlinear plant uses its closed-form
    construction (pass ``example`` to reuse one with a custom path).
    """
    if isinstance(plant, NonlinearPlant):
        ex = example if example is not None else builtin_nonlinear_example(plant.k)
        ts = compute_thresholds(ex.gains, ex.eta, ex.sigma, ex.phi, ex.lyap, practical_c)
        return ClosedLoopDesign(ex.gains, ex.eta, ex.sigma, ex.phi, ex.lyap, ts)
    d = design_linear(plant, epsilon)
    ts = compute_thresholds(d.gains, d.eta, d.sigma, d.phi, d.lyap, practical_c)
    theta = build_theta_linear(plant, ts, d.sigma, d.lyap, kappa)
    return ClosedLoopDesign(d.gains, d.eta, d.sigma, d.phi, d.lyap, ts, theta, d.coeffs)
