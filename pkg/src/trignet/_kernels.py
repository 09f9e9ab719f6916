"""Closed-loop event loop.

Written in the numba-compatible subset of Python so the same source runs
compiled (``_accel.njit``) or as plain numpy code.  All buffers are allocated
by the caller; the loop itself never allocates per step.
"""
import numpy as np

from ._accel import njit

LINEAR = 0
NONLINEAR = 1

BASIC = 0
PRACTICAL = 1
PARSIMONIOUS = 2
PERIODIC = 3
ROUND_ROBIN = 4

# Slots of the ``stats`` output vector.
S_STEPS = 0
S_DIVERGED = 1
S_MAX_DV = 2
S_MAX_DV_ABOVE_CHAT = 3
S_LEVEL_STEP = 4
S_MAX_TRIGGER_VIOLATION = 5
S_ENTRY_STEP = 6
S_MAX_V_AFTER_ENTRY = 7
S_EVENTS_RECORDED = 8
S_EVENTS_OVERFLOW = 9
N_STATS = 10


@njit(inline='always')
def powr(r, p):
    if p == 2.0:
        return r * r
    if p == 1.0:
        return r
    if p == 0.5:
        return np.sqrt(r)
    return r ** p


@njit(inline='always')
def gain_eval(tab, i, r):
    """Max-of-powers gain row ``i`` of a ``(n, terms, 2)`` coefficient/exponent table."""
    out = 0.0
    for q in range(tab.shape[1]):
        c = tab[i, q, 0]
        if c > 0.0:
            v = c * powr(r, tab[i, q, 1])
            if v > out:
                out = v
    return out


@njit
def rhs(kind, M, Nm, kparam, x, xh, out):
    if kind == LINEAR:
        n = x.shape[0]
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += M[a, b] * x[b] + Nm[a, b] * xh[b]
            out[a] = acc
    else:
        out[0] = x[0] * x[1] - x[0] * x[0] * xh[0]
        out[1] = x[0] * x[0] - kparam * xh[1]


@njit
def rk4_inplace(kind, M, Nm, kparam, x, xh, dt, k1, k2, k3, k4, tmp):
    """Classical RK4 step with ``xh`` frozen, in place on ``x``."""
    n = x.shape[0]
    rhs(kind, M, Nm, kparam, x, xh, k1)
    for a in range(n):
        tmp[a] = x[a] + 0.5 * dt * k1[a]
    rhs(kind, M, Nm, kparam, tmp, xh, k2)
    for a in range(n):
        tmp[a] = x[a] + 0.5 * dt * k2[a]
    rhs(kind, M, Nm, kparam, tmp, xh, k3)
    for a in range(n):
        tmp[a] = x[a] + dt * k3[a]
    rhs(kind, M, Nm, kparam, tmp, xh, k4)
    for a in range(n):
        x[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])


@njit(inline='always')
def block_norm(v, lo, hi):
    acc = 0.0
    for a in range(lo, hi):
        acc += v[a] * v[a]
    return np.sqrt(acc)


@njit(inline='always')
def block_diff_norm(u, v, lo, hi):
    acc = 0.0
    for a in range(lo, hi):
        d = u[a] - v[a]
        acc += d * d
    return np.sqrt(acc)


@njit(inline='always')
def quad_form(P, x, lo, hi):
    acc = 0.0
    for a in range(lo, hi):
        row = 0.0
        for b in range(lo, hi):
            row += P[a, b] * x[b]
        acc += x[a] * row
    return acc


@njit(inline='always')
def lyapunov_values(P, off, sig_inv, x, Vi):
    """Fill ``Vi`` and return ``V = max_i sigma_i^{-1}(V_i)``."""
    V = 0.0
    for i in range(Vi.shape[0]):
        Vi[i] = quad_form(P, x, off[i], off[i + 1])
        w = sig_inv[i, 0] * powr(Vi[i], sig_inv[i, 1])
        if w > V:
            V = w
    return V


@njit
def run_loop(kind, scheme, M, Nm, Phi, Psi, kparam, off, P, sig_inv,
             chi, eta_hat, pinv, has_t2, c_prac, c_hat,
             th_coeffs, th_local, th_kappa, th_off,
             x0, xh0, dt, nsteps, period, stride, rest_tol, div_bound, level,
             tr_t, tr_x, tr_xh, tr_Vi, tr_V, tr_ev, tr_sup,
             ev_step, ev_sub, ev_d, ev_resid,
             counts, sup_counts, audit_fail, min_gap, stats):
    n = off.shape[0] - 1
    N = x0.shape[0]
    x = x0.copy()
    xh = xh0.copy()
    k1 = np.zeros(N)
    k2 = np.zeros(N)
    k3 = np.zeros(N)
    k4 = np.zeros(N)
    tmp = np.zeros(N)
    xdot = np.zeros(N)
    Vi = np.zeros(n)
    snap = x0.copy()
    t_prev = np.zeros(n)
    last = np.full(n, -1, dtype=np.int64)
    at_zero = np.zeros(n, dtype=np.bool_)
    fire = np.zeros(n, dtype=np.bool_)
    sup = np.zeros(n, dtype=np.bool_)
    max_events = ev_step.shape[0]
    event_triggered = scheme == BASIC or scheme == PRACTICAL or scheme == PARSIMONIOUS
    for i in range(n):
        counts[i] = 0
        sup_counts[i] = 0
        audit_fail[i] = 0
        min_gap[i] = -1
        if block_norm(x, off[i], off[i + 1]) < rest_tol and block_diff_norm(x, xh, off[i], off[i + 1]) == 0.0:
            at_zero[i] = True
    for s in range(stats.shape[0]):
        stats[s] = 0.0
    stats[S_LEVEL_STEP] = -1.0
    stats[S_ENTRY_STEP] = -1.0
    n_rec = 0
    row = 0
    next_sample = period
    rr_next = 0
    V_prev = lyapunov_values(P, off, sig_inv, x, Vi)
    if level > 0.0 and block_norm(x, 0, N) <= level:
        stats[S_LEVEL_STEP] = 0.0
    k = 0
    while True:
        t = k * dt
        if k > 0:
            if kind == LINEAR:
                # Exact RK4 propagators, inlined: a helper call here doubles the step cost.
                for a in range(N):
                    acc = 0.0
                    for b in range(N):
                        acc += Phi[a, b] * x[b] + Psi[a, b] * xh[b]
                    tmp[a] = acc
                for a in range(N):
                    x[a] = tmp[a]
            else:
                rk4_inplace(kind, M, Nm, kparam, x, xh, dt, k1, k2, k3, k4, tmp)
            xn = block_norm(x, 0, N)
            if not (xn <= div_bound):
                stats[S_DIVERGED] = 1.0
                break
        # Decide broadcasts on the post-step state; all firing subsystems refresh together.
        # Broadcasts do not move x, so V_i and V computed here stay valid afterwards.
        V = lyapunov_values(P, off, sig_inv, x, Vi)
        for i in range(n):
            fire[i] = False
            sup[i] = False
        if event_triggered:
            for i in range(n):
                lo = off[i]
                hi = off[i + 1]
                xi_norm = block_norm(x, lo, hi)
                # Rest at zero: on entering the zero ball broadcast once, unless the
                # error is already zero to the same tolerance; then stay silent.
                if xi_norm < rest_tol:
                    if not at_zero[i]:
                        fire[i] = block_diff_norm(xh, x, lo, hi) >= rest_tol
                        at_zero[i] = True
                    continue
                at_zero[i] = False
                e_norm = block_diff_norm(xh, x, lo, hi)
                if scheme == PRACTICAL:
                    lvl = sig_inv[i, 0] * powr(Vi[i], sig_inv[i, 1])
                    if c_prac[i] > lvl:
                        lvl = c_prac[i]
                    fire[i] = gain_eval(eta_hat, i, e_norm) - lvl >= 0.0
                    continue
                t1 = gain_eval(chi, i, e_norm) - Vi[i]
                if t1 < 0.0:
                    continue
                if scheme == BASIC or not has_t2[i] or k == 0:
                    fire[i] = True
                    continue
                d = block_diff_norm(x, snap, lo, hi) / (t - t_prev[i])
                rest = d - (th_kappa[i] + th_coeffs[i, i]) * xi_norm - th_local[i] * e_norm
                W = rest / th_off[i]
                if W < 0.0:
                    W = 0.0
                t2 = gain_eval(pinv, i, e_norm) - W
                if t2 >= 0.0:
                    fire[i] = True
                else:
                    sup[i] = True
                    sup_counts[i] += 1
                    # Audit with full-state knowledge: V(x) >= eta_hat_i(|e_i|) must hold.
                    if V < gain_eval(eta_hat, i, e_norm):
                        audit_fail[i] += 1
        elif k > 0 and t + 0.5 * dt >= next_sample:
            next_sample += period
            if scheme == PERIODIC:
                for i in range(n):
                    fire[i] = True
            else:
                fire[rr_next] = True
                rr_next = (rr_next + 1) % n
        any_fire = False
        for i in range(n):
            if fire[i]:
                any_fire = True
        if any_fire:
            rhs(kind, M, Nm, kparam, x, xh, xdot)
            for i in range(n):
                if not fire[i]:
                    continue
                lo = off[i]
                hi = off[i + 1]
                counts[i] += 1
                if last[i] >= 0:
                    gap = k - last[i]
                    if min_gap[i] < 0 or gap < min_gap[i]:
                        min_gap[i] = gap
                last[i] = k
                if k > 0:
                    d = block_diff_norm(x, snap, lo, hi) / (t - t_prev[i])
                    resid = abs(block_norm(xdot, lo, hi) - d) - th_kappa[i] * block_norm(x, lo, hi)
                else:
                    d = 0.0
                    resid = np.nan
                if n_rec < max_events:
                    ev_step[n_rec] = k
                    ev_sub[n_rec] = i
                    ev_d[n_rec] = d
                    ev_resid[n_rec] = resid
                    n_rec += 1
                else:
                    stats[S_EVENTS_OVERFLOW] = 1.0
                for a in range(lo, hi):
                    xh[a] = x[a]
                    snap[a] = x[a]
                t_prev[i] = t
        if k > 0:
            inc = (V - V_prev) / (1.0 + V_prev)
            if inc > stats[S_MAX_DV]:
                stats[S_MAX_DV] = inc
            if V_prev >= c_hat * (1.0 + 1e-6) and inc > stats[S_MAX_DV_ABOVE_CHAT]:
                stats[S_MAX_DV_ABOVE_CHAT] = inc
        V_prev = V
        if event_triggered:
            for i in range(n):
                if at_zero[i]:
                    continue
                e_norm = block_diff_norm(xh, x, off[i], off[i + 1])
                if scheme == PRACTICAL:
                    lvl = sig_inv[i, 0] * powr(Vi[i], sig_inv[i, 1])
                    if c_prac[i] > lvl:
                        lvl = c_prac[i]
                    viol = (gain_eval(eta_hat, i, e_norm) - lvl) / (1.0 + lvl)
                else:
                    viol = (gain_eval(chi, i, e_norm) - Vi[i]) / (1.0 + Vi[i])
                if viol > stats[S_MAX_TRIGGER_VIOLATION] and not sup[i]:
                    stats[S_MAX_TRIGGER_VIOLATION] = viol
        if c_hat > 0.0:
            if stats[S_ENTRY_STEP] < 0.0 and V <= c_hat * 1.05:
                stats[S_ENTRY_STEP] = k
            if stats[S_ENTRY_STEP] >= 0.0 and V / c_hat > stats[S_MAX_V_AFTER_ENTRY]:
                stats[S_MAX_V_AFTER_ENTRY] = V / c_hat
        if level > 0.0 and stats[S_LEVEL_STEP] < 0.0 and block_norm(x, 0, N) <= level:
            stats[S_LEVEL_STEP] = k
        if k % stride == 0 or k == nsteps:
            tr_t[row] = t
            for a in range(N):
                tr_x[row, a] = x[a]
                tr_xh[row, a] = xh[a]
            for i in range(n):
                tr_Vi[row, i] = Vi[i]
                tr_ev[row, i] = 1 if fire[i] else 0
                tr_sup[row, i] = 1 if sup[i] else 0
            tr_V[row] = V
            row += 1
        if k == nsteps:
            break
        k += 1
    stats[S_STEPS] = k
    stats[S_EVENTS_RECORDED] = n_rec
    return row
