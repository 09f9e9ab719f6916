import math

import numpy as np
import pytest

from support import synthetic_trace
from trignet.plant import LinearPlant, NonlinearPlant, random_initial_state
from trignet.sim import (
    DivergenceError,
    SimConfig,
    metrics_summary,
    rk4_step,
    run_simulation,
    zeno_monitor,
)
from trignet.trigger import synthesize

X0_TWO_BODY = (-4.0, 3.0)


def scalar_plant(k=-1.0):
    return LinearPlant([[-1.0]], (np.ones((1, 1)),), [[k]])


def two_body(design, scheme, dt=1e-4, t_end=0.5, **kw):
    return run_simulation(NonlinearPlant(64.0), design, SimConfig(t_end, dt, scheme, x0=X0_TWO_BODY, **kw))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(t_end=-1.0), dict(scheme="bogus"),
                                    dict(scheme="periodic"), dict(xhat0="other"), dict(record_every=0)])
    def test_rejects_invalid(self, kw):
        base = dict(t_end=1.0, dt=0.1)
        base.update(kw)
        with pytest.raises(ValueError):
            SimConfig(**base)

    def test_defaults(self):
        cfg = SimConfig(1.0, 1e-3)
        assert cfg.steps == 1000 and cfg.gap_floor == pytest.approx(2e-3) and cfg.zeno_window_count == 50


class TestRK4:
    def test_exponential(self):
        x = rk4_step(scalar_plant(0.0), np.array([1.0]), np.array([0.0]), 0.1)
        assert x[0] == pytest.approx(math.exp(-0.1), abs=1e-7)
        assert x[0] == pytest.approx(0.904837418, abs=1e-7)

    def test_constant_field(self):
        # x1' = x1 (x2 - xhat1) and x2' = x1^2 - k xhat2 both vanish on this point
        x = np.array([0.0, 0.0])
        np.testing.assert_array_equal(rk4_step(NonlinearPlant(64.0), x, x, 0.1), x)
        x = np.array([0.0, 0.25])
        np.testing.assert_array_equal(rk4_step(NonlinearPlant(64.0), x, np.zeros(2), 0.1), x)

    def test_divergence(self):
        with pytest.raises(DivergenceError, match="divergence detected"), np.errstate(invalid="ignore"):
            rk4_step(NonlinearPlant(64.0), np.array([np.inf, 0.0]), np.zeros(2), 0.1)

    def test_step_halving_order(self):
        plant = NonlinearPlant(64.0)
        x0 = np.array(X0_TWO_BODY)
        xh = x0.copy()

        def reference(h):
            x = x0.copy()
            for _ in range(64):
                x = rk4_step(plant, x, xh, h / 64)
            return x

        # local error is O(h^5), so halving h divides it by about 32
        errors = [np.linalg.norm(rk4_step(plant, x0, xh, h) - reference(h)) for h in (4e-3, 2e-3)]
        assert 28 <= errors[0] / errors[1] <= 36


class TestRuns:
    def test_decoupled_scalar(self):
        plant = scalar_plant(-1.0)
        design = synthesize(plant)
        trace, zeno, m = run_simulation(plant, design, SimConfig(20.0, 1e-3, "basic", x0=(1.0,)))
        assert 0 < m.total < 10_000
        assert m.final_norm < 1e-2
        assert not zeno.suspected

    def test_two_body_basic(self, nonlinear_design):
        trace, zeno, m = two_body(nonlinear_design, "basic")
        assert 5 <= m.total <= 40
        assert trace.n == 2 and trace.x.shape == (5001, 2)

    def test_two_body_round_robin_fails_to_stabilise(self, nonlinear_design):
        _, _, basic = two_body(nonlinear_design, "basic")
        _, _, rr = two_body(nonlinear_design, "roundrobin", period=0.5 / 12)
        assert rr.final_norm >= 10 * basic.final_norm

    def test_periodic_sample_count(self, nonlinear_design):
        trace, zeno, m = two_body(nonlinear_design, "periodic", period=0.5 / 66)
        assert m.event_times in (66, 67)
        assert m.counts[0] == m.counts[1]
        assert not zeno.suspected

    def test_round_robin_cycles(self, nonlinear_design):
        trace, _, _ = two_body(nonlinear_design, "roundrobin", period=0.01, t_end=0.1)
        subs = trace.events.subsystem
        np.testing.assert_array_equal(subs, np.arange(len(subs)) % 2)

    def test_periodic_protocol_round_robin_alias(self, nonlinear_design):
        plant = NonlinearPlant(64.0)
        a = run_simulation(plant, nonlinear_design, SimConfig(0.1, 1e-4, "roundrobin", x0=X0_TWO_BODY, period=0.01))
        b = run_simulation(plant, nonlinear_design, SimConfig(0.1, 1e-4, "periodic", x0=X0_TWO_BODY, period=0.01,
                                                              protocol="roundrobin"))
        np.testing.assert_array_equal(a[0].x, b[0].x)


class TestInvariants:
    def test_basic_trigger_inequality(self, nonlinear_design):
        trace, _, _ = two_body(nonlinear_design, "basic")
        ts = nonlinear_design.thresholds
        for i in range(2):
            e = np.abs(trace.block(trace.e, i)[:, 0])
            assert np.all(trace.V_i[:, i] >= ts.chi[i](e) - 1e-12)

    def test_practical_trigger_inequality(self, nonlinear_design):
        trace, _, _ = two_body(nonlinear_design, "practical")
        ts, sigma = nonlinear_design.thresholds, nonlinear_design.sigma
        for i in range(2):
            e = np.abs(trace.block(trace.e, i)[:, 0])
            level = np.maximum(sigma.inverse(i)(trace.V_i[:, i]), ts.c[i])
            assert np.all(level >= ts.eta_hat[i](e) - 1e-12)

    def test_error_reset(self, seed7_plant, seed7_design):
        x0 = random_initial_state(seed7_plant, 7)
        trace, _, _ = run_simulation(seed7_plant, seed7_design,
                                     SimConfig(30.0, 1e-3, "basic", x0=tuple(x0), xhat0="zero"))
        assert trace.event_flags.sum() > 0
        for i in range(3):
            rows = trace.event_flags[:, i] == 1
            assert np.all(trace.block(trace.e, i)[rows] == 0.0)

    def test_lyapunov_decrease_basic(self, nonlinear_design):
        trace, _, m = two_body(nonlinear_design, "basic")
        dV = np.diff(trace.V)
        assert np.all(dV <= 1e-9 * (1 + trace.V[:-1]))
        assert m.max_V_increase <= 1e-9

    def test_determinism(self, seed7_plant, seed7_design):
        cfg = SimConfig(50.0, 1e-3, "parsimonious", x0=tuple(random_initial_state(seed7_plant, 3)))
        a, _, _ = run_simulation(seed7_plant, seed7_design, cfg)
        b, _, _ = run_simulation(seed7_plant, seed7_design, cfg)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.events.step, b.events.step)

    def test_refinement(self, nonlinear_design):
        counts = [two_body(nonlinear_design, "basic", dt=dt)[2].total for dt in (1e-4, 5e-5)]
        assert abs(counts[1] - counts[0]) <= 0.1 * counts[0]

    def test_stride_keeps_exact_event_log(self, nonlinear_design):
        full, _, m_full = two_body(nonlinear_design, "basic")
        thin, _, m_thin = two_body(nonlinear_design, "basic", record_every=100)
        np.testing.assert_array_equal(full.events.step, thin.events.step)
        assert len(thin.t) == 51 and np.all(np.diff(thin.t) > 0)
        assert m_full.total == m_thin.total

    def test_parsimonious_suppresses_soundly(self, seed7_plant, seed7_design):
        x0 = np.array(random_initial_state(seed7_plant, 7))
        x0[:3] *= 1e-3
        trace, zeno, m = run_simulation(seed7_plant, seed7_design,
                                        SimConfig(300.0, 1e-3, "parsimonious", x0=tuple(x0), record_every=100))
        assert sum(m.suppressed) > 0
        assert sum(m.audit_failures) == 0
        assert not zeno.suspected

    def test_practical_requires_constants(self, seed7_plant):
        design = synthesize(seed7_plant)
        with pytest.raises(ValueError, match="positive constants"):
            run_simulation(seed7_plant, design, SimConfig(1.0, 1e-3, "practical", x0=(1.0,) * 9))

    def test_divergence_flagged(self, nonlinear_design):
        _, _, m = two_body(nonlinear_design, "roundrobin", period=0.5 / 12)
        assert m.diverged and m.final_norm == math.inf


class TestZeno:
    def test_geometric_gaps_flagged(self):
        gaps = np.maximum(np.round(1000 * 0.7 ** np.arange(30)), 1).astype(int)
        report = zeno_monitor(synthetic_trace(np.cumsum(gaps)), SimConfig(10.0, 1e-3))
        assert report.suspected

    def test_periodic_baseline_clear(self, nonlinear_design):
        _, zeno, _ = two_body(nonlinear_design, "periodic", period=0.01)
        assert zeno.verdict == "none"

    def test_window_count(self):
        report = zeno_monitor(synthetic_trace(np.arange(0, 300)), SimConfig(10.0, 1e-3, zeno_gap_floor=1e-4))
        assert report.suspected and any("events within" in r for r in report.reasons)
        assert not any("below floor" in r for r in report.reasons)


class TestMetrics:
    def test_empty_event_trace(self, seed7_plant, seed7_design):
        trace, zeno, m = run_simulation(seed7_plant, seed7_design, SimConfig(1.0, 1e-3, "basic", x0=(0.0,) * 9))
        assert m.total == 0 and m.counts == (0, 0, 0)
        assert m.min_gap == (None, None, None) and m.mean_gap == (None, None, None)
        assert m.min_gap_overall is None
        assert zeno.verdict == "none"

    def test_time_to_level(self, nonlinear_design):
        trace, _, _ = two_body(nonlinear_design, "basic")
        m = metrics_summary(trace, level=2.0)
        norms = np.linalg.norm(trace.x, axis=1)
        assert m.time_to_level == pytest.approx(trace.t[np.argmax(norms <= 2.0)])

    def test_to_dict_is_json_safe(self, nonlinear_design):
        import json
        _, _, m = two_body(nonlinear_design, "roundrobin", period=0.5 / 12)
        doc = json.loads(json.dumps(m.to_dict()))
        assert doc["final_norm"] == "inf" and doc["diverged"] is True
