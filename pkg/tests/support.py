"""Reference implementations shared by the unit and acceptance tests."""
import numpy as np

from trignet.sim import EventLog, SimTrace


def brute_force_W(th, j, x_norm, e_norm, d, points=50):
    """Grid minimum of ``max_k z_k`` over ``sum_k Theta_jk z_k >= rest``; returns (value, grid step)."""
    n = th.coeffs.shape[0]
    others = [k for k in range(n) if k != j]
    rest = d - (th.kappa[j] + th.coeffs[j, j]) * x_norm - th.local[j] * e_norm
    if rest <= 0:
        return 0.0, 0.0
    upper = 2.0 * rest / min(th.coeffs[j, k] for k in others)
    axis = np.linspace(0.0, upper, points)
    mesh = np.stack(np.meshgrid(*([axis] * len(others)), indexing="ij"), axis=-1).reshape(-1, len(others))
    feasible = mesh @ th.coeffs[j, others] >= rest
    return float(mesh[feasible].max(axis=1).min()), axis[1] - axis[0]


def synthetic_trace(steps, n=1, dt=1e-3):
    """Flat trace whose event log holds subsystem 0 firing at ``steps``."""
    steps = np.asarray(steps, dtype=np.int64)
    events = EventLog(steps, steps * dt, np.zeros_like(steps), np.zeros(len(steps)), np.full(len(steps), np.nan))
    rows = int(steps.max()) + 1 if len(steps) else 2
    z = np.zeros((rows, n))
    counts = np.array([len(steps)] + [0] * (n - 1))
    gap = int(np.diff(steps).min()) if len(steps) > 1 else -1
    return SimTrace(np.arange(rows) * dt, z, z, z, np.zeros(rows), z.astype(np.int8), z.astype(np.int8),
                    np.arange(n + 1), events, dt, "basic", counts, np.zeros(n, int), np.zeros(n, int),
                    np.array([gap] + [-1] * (n - 1)), {"diverged": False, "level_step": -1, "entry_step": -1,
                                                       "max_V_increase": 0.0, "max_V_increase_above_c_hat": 0.0,
                                                       "c_hat": 0.0, "max_V_after_entry": 0.0,
                                                       "max_trigger_violation": 0.0, "runtime": 0.0})
