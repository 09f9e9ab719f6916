"""Fixed-step closed-loop simulation with event detection, Zeno monitoring and metrics."""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels as K
from ._accel import NUMBA_ENABLED
from .gainalg import GainExpr
from .plant import LinearPlant, NonlinearPlant
from .trigger import ClosedLoopDesign, psi_inverse_eta_hat

SCHEMES = ("basic", "practical", "parsimonious", "periodic", "roundrobin")
_SCHEME_CODES = {"basic": K.BASIC, "practical": K.PRACTICAL, "parsimonious": K.PARSIMONIOUS,
                 "periodic": K.PERIODIC, "roundrobin": K.ROUND_ROBIN}
REST_TOL = 1e-12
DIVERGENCE_BOUND = 1e12


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.

    ``scheme`` is one of ``basic``, ``practical``, ``parsimonious``,
    ``periodic`` or ``roundrobin``; the last two need ``period``.  A periodic
    run with ``protocol="roundrobin"`` is the same as ``scheme="roundrobin"``.
    ``xhat0`` is ``"copy"`` (zero initial error) or ``"zero"``.
    ``record_every`` thins the stored trace; events are always logged exactly.
    """

    t_end: float
    dt: float
    scheme: str = "basic"
    x0: tuple | None = None
    xhat0: str = "copy"
    period: float | None = None
    protocol: str = "all"
    zeno_gap_floor: float | None = None
    zeno_window_count: int = 50
    record_every: int = 1
    max_events: int = 1_000_000
    level: float | None = None

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise ValueError("t_end must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.protocol not in ("all", "roundrobin"):
            raise ValueError("protocol must be 'all' or 'roundrobin'")
        if self.scheme in ("periodic", "roundrobin") and not (self.period and self.period > 0):
            raise ValueError(f"scheme {self.scheme!r} needs a positive period")
        if self.xhat0 not in ("copy", "zero"):
            raise ValueError("xhat0 must be 'copy' or 'zero'")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.zeno_window_count < 1:
            raise ValueError("zeno_window_count must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def gap_floor(self) -> float:
        return 2.0 * self.dt if self.zeno_gap_floor is None else self.zeno_gap_floor

    @property
    def scheme_code(self) -> int:
        if self.scheme == "periodic" and self.protocol == "roundrobin":
            return K.ROUND_ROBIN
        return _SCHEME_CODES[self.scheme]

    @property
    def event_triggered(self) -> bool:
        return self.scheme in ("basic", "practical", "parsimonious")


@dataclass(frozen=True)
class EventLog:
    """Broadcasts in order: grid step, time, subsystem, quotient ``d`` and derivative-gap residual."""

    step: np.ndarray
    time: np.ndarray
    subsystem: np.ndarray
    d: np.ndarray
    residual: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.step)

    def steps_of(self, i: int) -> np.ndarray:
        return self.step[self.subsystem == i]


@dataclass(frozen=True)
class SimTrace:
    """Sampled closed-loop trajectory plus the exact event log and run counters."""

    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    V_i: np.ndarray
    V: np.ndarray
    event_flags: np.ndarray
    suppressed_flags: np.ndarray
    offsets: np.ndarray
    events: EventLog
    dt: float
    scheme: str
    counts: np.ndarray
    suppressed: np.ndarray
    audit_failures: np.ndarray
    min_gap_steps: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def e(self) -> np.ndarray:
        return self.xhat - self.x

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    def block(self, arr: np.ndarray, i: int) -> np.ndarray:
        return arr[:, self.offsets[i]:self.offsets[i + 1]]


@dataclass(frozen=True)
class ZenoReport:
    verdict: str
    min_gap: tuple
    max_window_count: tuple
    reasons: tuple = ()

    @property
    def suspected(self) -> bool:
        return self.verdict == "suspected"


@dataclass(frozen=True)
class MetricsSummary:
    counts: tuple
    total: int
    event_times: int
    min_gap: tuple
    mean_gap: tuple
    min_gap_overall: float | None
    initial_norm: float
    final_norm: float
    final_V: float
    time_to_level: float | None
    max_V_increase: float
    max_V_increase_above_c_hat: float
    c_hat: float
    entered_target: float | None
    max_V_after_entry: float | None
    max_trigger_violation: float
    suppressed: tuple
    audit_failures: tuple
    max_derivative_gap: float | None
    diverged: bool
    runtime: float

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(u) for u in v]
            if isinstance(v, float) and not math.isfinite(v):
                return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
            return v
        return {k: clean(v) for k, v in asdict(self).items()}


def _plant_rhs_matrices(plant):
    if isinstance(plant, LinearPlant):
        return K.LINEAR, np.ascontiguousarray(plant.A), np.ascontiguousarray(plant.Bbar), 0.0
    if isinstance(plant, NonlinearPlant):
        z = np.zeros((2, 2))
        return K.NONLINEAR, z, z, float(plant.k)
    raise TypeError(f"unsupported plant type {type(plant).__name__}")


def rk4_propagators(M: np.ndarray, Nm: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Matrices with ``RK4(x' = M x + Nm xh) = Phi x + Psi xh`` for one step of ``dt``."""
    n = M.shape[0]
    hM = dt * M
    I = np.eye(n)
    hM2 = hM @ hM
    hM3 = hM2 @ hM
    Phi = I + hM + hM2 / 2.0 + hM3 / 6.0 + hM3 @ hM / 24.0
    S = dt * (I + hM / 2.0 + hM2 / 6.0 + hM3 / 24.0)
    return Phi, S @ Nm


def rk4_step(plant, x, xhat, dt: float) -> np.ndarray:
    """Classical RK4 step with ``xhat`` held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    f = plant.rhs
    k1 = f(x, xhat)
    k2 = f(x + 0.5 * dt * k1, xhat)
    k3 = f(x + 0.5 * dt * k2, xhat)
    k4 = f(x + dt * k3, xhat)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("divergence detected")
    return out


def _gain_table(exprs) -> np.ndarray:
    width = max([1] + [len(g.terms) for g in exprs])
    tab = np.zeros((len(exprs), width, 2))
    tab[:, :, 1] = 1.0
    for i, g in enumerate(exprs):
        for q, term in enumerate(g.terms):
            tab[i, q] = term.coeff, term.exponent
    return tab


def _select_kernel(backend: str | None):
    backend = backend or os.environ.get("TRIGNET_BACKEND") or ("numba" if NUMBA_ENABLED else "numpy")
    if backend == "numba":
        if not NUMBA_ENABLED:
            raise ValueError("numba backend requested but numba is disabled")
        return K.run_loop
    if backend == "numpy":
        return K.run_loop.py_func
    raise ValueError(f"unknown backend {backend!r}")


def _initial_state(plant, config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.x0 is None:
        raise ValueError("config.x0 is required")
    x0 = np.asarray(config.x0, dtype=float).reshape(-1)
    if x0.shape != (plant.n_state,):
        raise ValueError(f"x0 must have {plant.n_state} entries, got {x0.size}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    xh0 = x0.copy() if config.xhat0 == "copy" else np.zeros_like(x0)
    return x0, xh0


def run_simulation(plant, design: ClosedLoopDesign, config: SimConfig,
                   backend: str | None = None) -> tuple[SimTrace, ZenoReport, MetricsSummary]:
    """Simulate the closed loop on the fixed grid ``k * dt``.

    After every RK4 step each subsystem evaluates its trigger on the new state;
    all subsystems that fire refresh their held state at once.  Baselines refresh
    on the clock instead.  A run that leaves the ball of radius ``1e12`` stops
    early and is marked as diverged.
    """
    ts = design.thresholds
    n = plant.n
    if ts.n != n:
        raise ValueError("design and plant disagree on the number of subsystems")
    scheme = config.scheme_code
    if scheme == K.PRACTICAL and np.any(ts.c <= 0):
        raise ValueError("practical scheme requires positive constants")
    theta = design.theta
    if scheme == K.PARSIMONIOUS and theta is None:
        raise ValueError("parsimonious scheme needs a Theta bound (linear plants only)")
    kind, M, Nm, kparam = _plant_rhs_matrices(plant)
    if kind == K.LINEAR:
        Phi, Psi = rk4_propagators(M, Nm, config.dt)
    else:
        Phi = Psi = np.zeros((1, 1))
    offsets = np.asarray(plant.offsets, dtype=np.int64)
    P = np.ascontiguousarray(scipy.linalg.block_diag(*design.lyap.P))
    sig_inv = np.array([[g.coeff, g.exponent] for g in (design.sigma.inverse(i) for i in range(n))])
    chi = _gain_table(ts.chi)
    eta_hat = _gain_table(ts.eta_hat)
    pinv_exprs = [psi_inverse_eta_hat(ts, i) for i in range(n)]
    pinv = _gain_table([g if g is not None else GainExpr.zero() for g in pinv_exprs])
    if theta is not None:
        th_coeffs = np.ascontiguousarray(theta.coeffs, dtype=float)
        th_local = np.asarray(theta.local, dtype=float)
        th_kappa = np.asarray(theta.kappa, dtype=float)
        th_off = th_coeffs.sum(axis=1) - np.diag(th_coeffs)
    else:
        th_coeffs = np.zeros((n, n))
        th_local = np.zeros(n)
        th_kappa = np.zeros(n)
        th_off = np.zeros(n)
    has_t2 = np.array([g is not None for g in pinv_exprs]) & (th_off > 0)
    x0, xh0 = _initial_state(plant, config)

    nsteps = config.steps
    stride = config.record_every
    rows = nsteps // stride + 1 + (1 if nsteps % stride else 0)
    N = plant.n_state
    tr_t = np.zeros(rows)
    tr_x = np.zeros((rows, N))
    tr_xh = np.zeros((rows, N))
    tr_Vi = np.zeros((rows, n))
    tr_V = np.zeros(rows)
    tr_ev = np.zeros((rows, n), dtype=np.int8)
    tr_sup = np.zeros((rows, n), dtype=np.int8)
    ev_step = np.zeros(config.max_events, dtype=np.int64)
    ev_sub = np.zeros(config.max_events, dtype=np.int64)
    ev_d = np.zeros(config.max_events)
    ev_resid = np.zeros(config.max_events)
    counts = np.zeros(n, dtype=np.int64)
    sup_counts = np.zeros(n, dtype=np.int64)
    audit_fail = np.zeros(n, dtype=np.int64)
    min_gap = np.zeros(n, dtype=np.int64)
    stats = np.zeros(K.N_STATS)

    loop = _select_kernel(backend)
    start = time.perf_counter()
    used = loop(kind, scheme, M, Nm, Phi, Psi, kparam, offsets, P, sig_inv,
                chi, eta_hat, pinv, has_t2, np.asarray(ts.c, dtype=float), float(ts.c_hat),
                th_coeffs, th_local, th_kappa, th_off,
                x0, xh0, float(config.dt), nsteps, float(config.period or 0.0), stride,
                REST_TOL, DIVERGENCE_BOUND, float(config.level or 0.0),
                tr_t, tr_x, tr_xh, tr_Vi, tr_V, tr_ev, tr_sup,
                ev_step, ev_sub, ev_d, ev_resid,
                counts, sup_counts, audit_fail, min_gap, stats)
    runtime = time.perf_counter() - start

    n_rec = int(stats[K.S_EVENTS_RECORDED])
    events = EventLog(ev_step[:n_rec].copy(), ev_step[:n_rec] * config.dt, ev_sub[:n_rec].copy(),
                      ev_d[:n_rec].copy(), ev_resid[:n_rec].copy(), bool(stats[K.S_EVENTS_OVERFLOW]))
    stat_dict = {
        "steps": int(stats[K.S_STEPS]),
        "diverged": bool(stats[K.S_DIVERGED]),
        "max_V_increase": float(stats[K.S_MAX_DV]),
        "max_V_increase_above_c_hat": float(stats[K.S_MAX_DV_ABOVE_CHAT]),
        "level_step": int(stats[K.S_LEVEL_STEP]),
        "max_trigger_violation": float(stats[K.S_MAX_TRIGGER_VIOLATION]),
        "entry_step": int(stats[K.S_ENTRY_STEP]),
        "max_V_after_entry": float(stats[K.S_MAX_V_AFTER_ENTRY]),
        "c_hat": float(ts.c_hat),
        "runtime": runtime,
    }
    trace = SimTrace(tr_t[:used], tr_x[:used], tr_xh[:used], tr_Vi[:used], tr_V[:used],
                     tr_ev[:used], tr_sup[:used], offsets, events, float(config.dt), config.scheme,
                     counts, sup_counts, audit_fail, min_gap, stat_dict)
    return trace, zeno_monitor(trace, config), metrics_summary(trace)


def zeno_monitor(trace: SimTrace, config: SimConfig) -> ZenoReport:
    """Flag grid saturation: a gap below the floor or too many events in a ``100*dt`` window."""
    dt = config.dt
    window = 100
    gaps, windows, reasons = [], [], []
    for i in range(trace.n):
        steps = np.sort(trace.events.steps_of(i))
        if len(steps) >= 2:
            gap = float(np.diff(steps).min() * dt)
            busiest = int((np.searchsorted(steps, steps + window, side="left") - np.arange(len(steps))).max())
        else:
            gap = None
            busiest = int(len(steps))
        gaps.append(gap)
        windows.append(busiest)
        if gap is not None and gap < config.gap_floor * (1 - 1e-9):
            reasons.append(f"subsystem {i}: gap {gap:.3g} below floor {config.gap_floor:.3g}")
        if busiest > config.zeno_window_count:
            reasons.append(f"subsystem {i}: {busiest} events within {window} steps")
    verdict = "suspected" if reasons else "none"
    return ZenoReport(verdict, tuple(gaps), tuple(windows), tuple(reasons))


def metrics_summary(trace: SimTrace, level: float | None = None) -> MetricsSummary:
    """Communication and stability summary of a run.

    ``level`` recomputes the time-to-level from the stored samples; otherwise
    the value tracked during the run (if any) is used.
    """
    dt = trace.dt
    st = trace.stats
    n = trace.n
    ev = trace.events
    min_gap, mean_gap = [], []
    for i in range(n):
        steps = ev.steps_of(i)
        if len(steps) >= 2 and not ev.truncated:
            mean_gap.append(float((steps[-1] - steps[0]) * dt / (len(steps) - 1)))
        else:
            mean_gap.append(None)
        g = int(trace.min_gap_steps[i])
        min_gap.append(g * dt if g >= 0 else None)
    distinct = np.unique(ev.step)
    overall = float(np.diff(distinct).min() * dt) if len(distinct) >= 2 else None
    norms = np.linalg.norm(trace.x, axis=1)
    diverged = st.get("diverged", False)
    final_norm = math.inf if diverged else float(norms[-1])
    if level is not None:
        hit = np.flatnonzero(norms <= level)
        ttl = float(trace.t[hit[0]]) if len(hit) else None
    else:
        ttl = st["level_step"] * dt if st.get("level_step", -1) >= 0 else None
    entry = st["entry_step"] * dt if st.get("entry_step", -1) >= 0 else None
    resid = ev.residual[np.isfinite(ev.residual)]
    return MetricsSummary(
        counts=tuple(int(c) for c in trace.counts),
        total=int(trace.counts.sum()),
        event_times=int(len(distinct)),
        min_gap=tuple(min_gap),
        mean_gap=tuple(mean_gap),
        min_gap_overall=overall,
        initial_norm=float(norms[0]),
        final_norm=final_norm,
        final_V=float(trace.V[-1]) if not diverged else math.inf,
        time_to_level=ttl,
        max_V_increase=st["max_V_increase"],
        max_V_increase_above_c_hat=st["max_V_increase_above_c_hat"],
        c_hat=st["c_hat"],
        entered_target=entry,
        max_V_after_entry=st["max_V_after_entry"] if entry is not None else None,
        max_trigger_violation=st["max_trigger_violation"],
        suppressed=tuple(int(c) for c in trace.suppressed),
        audit_failures=tuple(int(c) for c in trace.audit_failures),
        max_derivative_gap=float(resid.max()) if len(resid) else None,
        diverged=bool(diverged),
        runtime=float(st.get("runtime", 0.0)),
    )
