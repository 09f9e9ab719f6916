import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from support import brute_force_W
from trignet.gainalg import GainExpr, GainMatrix, MAFKind, PowerGain, log_grid
from trignet.omega import OmegaPath, PhiMap
from trignet.plant import LyapunovData, builtin_nonlinear_example
from trignet.trigger import (
    QuotientState,
    ThetaBound,
    ThresholdSet,
    compute_thresholds,
    compute_W,
    derivative_gap,
    eval_basic,
    eval_parsimonious,
    eval_practical,
    update_d,
)


def two_body_thresholds(c=None):
    ex = builtin_nonlinear_example(64.0)
    return ex, compute_thresholds(ex.gains, ex.eta, ex.sigma, ex.phi, ex.lyap, c)


def scalar_lyap(n=1):
    return LyapunovData.from_P([[[1.0]]] * n, (PowerGain(1.0, 2.0),) * n)


class TestThresholds:
    def test_two_body_closed_forms(self):
        _, ts = two_body_thresholds()
        sigma_bar = 1.0 / 8.0
        chi1, chi2 = ts.chi[0].single(), ts.chi[1].single()
        assert chi1.exponent == 2.0 and chi1.coeff == pytest.approx(1.0 / (math.sqrt(8.0) * sigma_bar), rel=1e-12)
        assert chi2.exponent == 2.0 and chi2.coeff == pytest.approx(sigma_bar**2 * 64**2 / 4, rel=1e-12)
        assert chi2.coeff == pytest.approx(16.0)

    def test_two_body_auxiliary_gains(self):
        _, ts = two_body_thresholds()
        assert ts.eta_hat[0].single().coeff == pytest.approx(2 * math.sqrt(2))
        assert (ts.eta_hat[1].single().coeff, ts.eta_hat[1].single().exponent) == pytest.approx((32.0, 1.0))
        assert (ts.psi[0].single().coeff, ts.psi[0].single().exponent) == pytest.approx((math.sqrt(32.0), 1.0))
        assert (ts.psi[1].single().coeff, ts.psi[1].single().exponent) == pytest.approx((0.5, 2.0))

    def test_c_hat(self):
        _, ts = two_body_thresholds([0.01, 0.01])
        # sigma_2^{-1}(0.01) = sqrt(0.01 / sigma_bar^2) = 0.8
        assert ts.c_hat == pytest.approx(0.8)

    def test_empty_listener_set(self):
        zero = GainExpr.zero()
        G = GainMatrix(((zero, zero), (zero, zero)), (MAFKind.MAX, MAFKind.MAX))
        eta = ((GainExpr.of(PowerGain(1.0, 1.0)), zero), (zero, zero))
        phi = PhiMap(((GainExpr.of(PowerGain(0.5, 1.0)), zero), (zero, zero)))
        sigma = OmegaPath((PowerGain.identity(), PowerGain.identity()))
        ts = compute_thresholds(G, eta, sigma, phi, scalar_lyap(2))
        assert ts.chi[1].is_zero and not ts.chi[0].is_zero

    def test_noninvertible_phi(self):
        zero = GainExpr.zero()
        G = GainMatrix(((zero,),), (MAFKind.MAX,))
        with pytest.raises(ValueError, match="phi"):
            compute_thresholds(G, ((GainExpr.of(PowerGain(1.0, 1.0)),),), OmegaPath((PowerGain.identity(),)),
                               PhiMap(((zero,),)), scalar_lyap())

    def test_linear_eta_hat_matches_numeric_composition(self, seed7_design):
        d = seed7_design
        r = log_grid()
        for j in range(3):
            assert d.thresholds.eta_hat[j].single().exponent == pytest.approx(2.0)
            oracle = np.zeros_like(r)
            for i in range(3):
                if d.eta[i][j].is_zero:
                    continue
                phi = d.phi.phi[i][j]
                for k, rk in enumerate(r):
                    target = d.eta[i][j](rk)
                    inv = brentq(lambda s: phi(s) - target, 0.0, 1e30, xtol=1e-300, rtol=1e-14)
                    oracle[k] = max(oracle[k], inv)
            np.testing.assert_allclose(d.thresholds.eta_hat[j](r), oracle, rtol=1e-10)

    def test_threshold_gains_are_class_k(self, seed7_design, nonlinear_design):
        r = log_grid()
        for design in (seed7_design, nonlinear_design):
            ts = design.thresholds
            for g in ts.chi + ts.eta_hat + ts.psi:
                assert g(0.0) == 0.0
                if not g.is_zero:
                    assert np.all(np.diff(g(r)) > 0)

    def test_chi_is_sigma_after_eta_hat(self, seed7_design):
        ts, sigma = seed7_design.thresholds, seed7_design.sigma
        r = log_grid()
        for j in range(3):
            np.testing.assert_allclose(ts.chi[j](r), sigma.sigma[j](ts.eta_hat[j](r)), rtol=1e-10)


class TestBasic:
    def test_zero_error_does_not_fire(self):
        ex, ts = two_body_thresholds()
        assert eval_basic(ts, ex.lyap, 0, [2.0], [0.0]) == pytest.approx(-2.0)

    def test_origin(self):
        ex, ts = two_body_thresholds()
        assert eval_basic(ts, ex.lyap, 1, [0.0], [0.0]) == 0.0

    def test_two_body_subsystem2(self):
        ex, ts = two_body_thresholds()
        assert eval_basic(ts, ex.lyap, 1, [1.0], [0.3]) == pytest.approx(0.94)


def scalar_practical(c):
    sigma = OmegaPath((PowerGain(2.0, 1.0),))
    ts = ThresholdSet((GainExpr.of(PowerGain(2.0, 2.0)),), (GainExpr.of(PowerGain(1.0, 2.0)),),
                      (GainExpr.zero(),), np.array([c]), max(c, c / 2))
    return ts, sigma


class TestPractical:
    def test_zero_error(self):
        ts, sigma = scalar_practical(0.01)
        assert eval_practical(ts, sigma, scalar_lyap(), 0, [0.5], [0.0]) == pytest.approx(-0.125)

    def test_dead_band_at_origin(self):
        ts, sigma = scalar_practical(0.01)
        assert eval_practical(ts, sigma, scalar_lyap(), 0, [0.0], [0.099]) < 0
        assert eval_practical(ts, sigma, scalar_lyap(), 0, [0.0], [0.1]) >= 0

    @pytest.mark.parametrize("x", [0.0, 0.05, 0.3, 2.0])
    def test_fires_at_closed_form_threshold(self, x):
        ts, sigma = scalar_practical(0.01)
        level = max(x * x / 2.0, 0.01)
        e_star = math.sqrt(level)
        assert eval_practical(ts, sigma, scalar_lyap(), 0, [x], [e_star * (1 - 1e-9)]) < 0
        assert eval_practical(ts, sigma, scalar_lyap(), 0, [x], [e_star * (1 + 1e-9)]) > 0

    def test_requires_positive_constant(self):
        ts, sigma = scalar_practical(0.0)
        with pytest.raises(ValueError, match="practical scheme requires positive constants"):
            eval_practical(ts, sigma, scalar_lyap(), 0, [1.0], [0.0])


class TestQuotient:
    def test_constant_state(self):
        qs = QuotientState.start(0.0, [np.array([1.0, 2.0])])
        assert update_d(qs, 0, 0.5, [1.0, 2.0]) == 0.0

    def test_linear_motion(self):
        v = np.array([3.0, -4.0])
        qs = QuotientState.start(1.0, [np.zeros(2)])
        assert update_d(qs, 0, 3.0, 2.0 * v) == pytest.approx(5.0)

    def test_rolls_forward_on_trigger(self):
        qs = QuotientState.start(0.0, [np.zeros(1)])
        update_d(qs, 0, 1.0, [1.0], triggered=True)
        assert qs.t_prev[0] == 1.0 and qs.snapshot[0][0] == 1.0
        assert update_d(qs, 0, 2.0, [1.0]) == 0.0

    def test_time_must_advance(self):
        qs = QuotientState.start(1.0, [np.zeros(1)])
        with pytest.raises(ValueError):
            update_d(qs, 0, 1.0, [0.0])

    def test_derivative_gap(self):
        assert derivative_gap(5.0, 3.0, 0.5, 2.0) == pytest.approx(1.0)


def theta(coeffs, local=None, kappa=None):
    coeffs = np.asarray(coeffs, dtype=float)
    n = coeffs.shape[0]
    return ThetaBound(coeffs, np.zeros(n) if local is None else np.asarray(local, float),
                      np.zeros(n) if kappa is None else np.asarray(kappa, float))


class TestW:
    def test_inactive_constraint(self):
        th = theta(np.ones((3, 3)), local=[1.0] * 3, kappa=[0.5] * 3)
        assert compute_W(th, 0, [1.0], 1.0, 2.4) == 0.0

    def test_worked_example(self):
        assert compute_W(theta(np.ones((3, 3))), 0, [0.0], 0.0, 4.0) == pytest.approx(2.0)
        value, step = brute_force_W(theta(np.ones((3, 3))), 0, 0.0, 0.0, 4.0)
        assert abs(value - 2.0) <= step

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 4))
            th = theta(rng.uniform(0.05, 2.0, (n, n)), rng.uniform(0, 1, n), rng.uniform(0, 0.5, n))
            j = int(rng.integers(n))
            x_norm, e_norm, d = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 10)
            closed = compute_W(th, j, [x_norm], e_norm, d)
            oracle, step = brute_force_W(th, j, x_norm, e_norm, d)
            assert closed <= oracle + 1e-12
            assert oracle - closed <= step * (1 + 1e-9)

    def test_decoupled_warns(self):
        th = theta(np.diag([1.0, 1.0]))
        with pytest.warns(RuntimeWarning, match="decoupled"):
            assert compute_W(th, 0, [0.0], 0.0, 5.0) == 0.0

    @given(st.floats(0, 10), st.floats(0, 10))
    def test_monotone_in_d(self, d1, d2):
        th = theta([[0.5, 1.0, 2.0], [1.0, 0.1, 1.0], [1.0, 1.0, 0.3]], [0.2] * 3)
        lo, hi = sorted((d1, d2))
        assert compute_W(th, 0, [0.1], 0.1, lo) <= compute_W(th, 0, [0.1], 0.1, hi)


class TestTheta:
    def test_bounds_vector_field(self, seed7_plant, seed7_design, rng):
        plant, d = seed7_plant, seed7_design
        ts, th, sigma, lyap = d.thresholds, d.theta, d.sigma, d.lyap
        o = plant.offsets
        for _ in range(2000):
            x = rng.normal(size=9) * rng.uniform(0, 1, 3).repeat(3)
            Vi = lyap.values(x, o)
            V = max(float(sigma.inverse(i)(Vi[i])) for i in range(3))
            j = int(rng.integers(3))
            e = np.zeros(9)
            for i in range(3):
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                if i == j:
                    radius = rng.uniform(0, 1)
                else:
                    radius = float(ts.eta_hat[i].inverse()(V)) * rng.uniform(0, 1)
                e[o[i]:o[i + 1]] = radius * u
            f = (plant.A @ x + plant.Bbar @ (x + e))[o[j]:o[j + 1]]
            norms = np.array([np.linalg.norm(x[o[k]:o[k + 1]]) for k in range(3)])
            bound = th.coeffs[j] @ norms + th.local[j] * np.linalg.norm(e[o[j]:o[j + 1]])
            assert np.linalg.norm(f) <= bound * (1 + 1e-9) + 1e-12

    def test_lipschitz_constant(self, seed7_design):
        np.testing.assert_allclose(seed7_design.theta.lipschitz, seed7_design.theta.coeffs.sum(axis=1))


class TestParsimonious:
    def test_short_circuits_on_negative_t1(self, seed7_design):
        d = seed7_design
        x, e = np.ones(3), np.zeros(3)
        t1 = eval_basic(d.thresholds, d.lyap, 0, x, e)
        assert eval_parsimonious(d.thresholds, d.theta, d.lyap, d.sigma, 0, x, e, 1e9) == t1 < 0

    def test_zero_error_negative(self, seed7_design):
        d = seed7_design
        assert eval_parsimonious(d.thresholds, d.theta, d.lyap, d.sigma, 1, np.ones(3), np.zeros(3), 0.0) < 0

    def test_suppressed_when_neighbours_large(self, seed7_design):
        d = seed7_design
        x = np.full(3, 1e-3)
        e = np.full(3, 1.0)
        assert eval_basic(d.thresholds, d.lyap, 0, x, e) >= 0
        fires = eval_parsimonious(d.thresholds, d.theta, d.lyap, d.sigma, 0, x, e, 0.0)
        assert fires >= 0
        suppressed = eval_parsimonious(d.thresholds, d.theta, d.lyap, d.sigma, 0, x, e, 1e12)
        assert suppressed < 0
