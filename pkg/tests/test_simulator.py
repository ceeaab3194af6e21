from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from gentune.case_model import case_from_dict, initialize_equilibrium, solve_power_flow
from gentune.dynamics import ControlInputs, DynamicModel, LoadSnapshot
from gentune.simulator import (
    ObjectiveSpec,
    SimulationConfig,
    SimulationError,
    SimulationTrace,
    StochasticLoadModel,
    TrapezoidalStepper,
    evaluate_objective,
    load_buses,
    run_replicates,
    run_simulation,
    sample_load_multipliers,
)

from conftest import isolated_generator_doc

QUIET = StochasticLoadModel(lambda_i=0.0, m_bound=0.0)


@dataclass(frozen=True)
class _LinearLayout:
    n_x: int


class LinearAdapter:
    """dx/dt = A x with one algebraic mirror y = x, in the stepper's model API."""

    def __init__(self, a):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.layout = _LinearLayout(len(self.a))

    def f(self, x, y, u):
        return self.a @ x

    def g(self, x, y, loads):
        return y - x

    def jacobians(self, x, y, u, loads):
        n = len(x)
        return self.a, np.zeros((n, n)), -np.eye(n), np.eye(n)


def _linear_step(a, x0, h, n):
    stepper = TrapezoidalStepper(LinearAdapter(a), None, h, tol=1e-14)
    x, y = np.asarray(x0, float), np.asarray(x0, float)
    for _ in range(n):
        x, y, _ = stepper.step(x, y, None)
    return x


class TestLoadMultipliers:
    def test_degenerate_noise(self):
        m = sample_load_multipliers(5, QUIET, 150, 11)
        assert m.shape == (150, 11)
        assert np.all(m == 1.0)

    def test_bias_only(self):
        m = sample_load_multipliers(5, StochasticLoadModel(0.0, 0.002), 150, 11)
        assert np.all(m == m[0])
        assert np.all((m >= 0.998) & (m <= 1.002))

    def test_seeded(self):
        model = StochasticLoadModel()
        a = sample_load_multipliers(42, model, 150, 11)
        assert a.tobytes() == sample_load_multipliers(42, model, 150, 11).tobytes()
        assert a.tobytes() != sample_load_multipliers(43, model, 150, 11).tobytes()

    def test_per_load_streams_independent_of_count(self):
        model = StochasticLoadModel()
        a = sample_load_multipliers(9, model, 50, 3)
        b = sample_load_multipliers(9, model, 50, 5)
        assert np.array_equal(a, b[:, :3])

    def test_white_noise_spread(self):
        m = sample_load_multipliers(1, StochasticLoadModel(0.005, 0.0), 20000, 1)
        assert np.std(m) == pytest.approx(0.005, rel=0.03)

    def test_ou_stationary_spread(self):
        model = StochasticLoadModel(0.005, 0.0, kind="ou", ou_tau=1.0)
        m = sample_load_multipliers(1, model, 50000, 1, h=0.2)
        assert np.std(m) == pytest.approx(0.005, rel=0.1)
        lag1 = np.corrcoef(m[:-1, 0], m[1:, 0])[0, 1]
        assert lag1 == pytest.approx(math.exp(-0.2), abs=0.02)

    def test_invalid(self):
        with pytest.raises(ValueError):
            StochasticLoadModel(lambda_i=-1.0)
        with pytest.raises(ValueError):
            StochasticLoadModel(kind="pink")


class TestConfig:
    def test_defaults(self):
        cfg = SimulationConfig()
        assert (cfg.t_end, cfg.h, cfg.newton_tol, cfg.newton_max_iter) == (30.0, 0.2, 1e-8, 25)
        assert cfg.n_steps == 150

    @pytest.mark.parametrize("kw", [{"h": 0.0}, {"t_end": 0.1}, {"t_end": 30.0, "h": 0.7}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimulationConfig(**kw)


class TestTrapezoidal:
    def test_scalar_closed_form(self):
        x1 = _linear_step([[-1.0]], [1.0], 0.2, 1)
        assert x1[0] == pytest.approx((1 - 0.1) / (1 + 0.1), abs=1e-14)

    def test_second_order_local_error(self):
        a = np.array([[0.0, 1.0], [-4.0, -0.4]])
        x0 = np.array([1.0, 0.0])
        h = 0.2
        exact = scipy.linalg.expm(a * h) @ x0
        e1 = np.linalg.norm(_linear_step(a, x0, h, 1) - exact)
        e2 = np.linalg.norm(_linear_step(a, x0, h / 2, 2) - exact)
        assert e1 / e2 == pytest.approx(4.0, rel=0.05)

    def test_second_order_global_error(self):
        a = np.array([[0.0, 1.0], [-4.0, -0.4]])
        x0 = np.array([1.0, 0.0])
        exact = scipy.linalg.expm(a * 2.0) @ x0
        errs = [np.linalg.norm(_linear_step(a, x0, 2.0 / n, n) - exact) for n in (20, 40, 80)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.02)
        assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.02)

    def test_equilibrium_fixed_point(self, ieee14, ieee14_pf):
        eq = initialize_equilibrium(ieee14, ieee14_pf)
        model = DynamicModel(ieee14, v0=eq.v0)
        u = ControlInputs(eq.v_ref, eq.p_c, eq.t_m0)
        stepper = TrapezoidalStepper(model, u, 0.2)
        x, y, _ = stepper.step(eq.x, eq.y, LoadSnapshot.base(ieee14))
        assert np.max(np.abs(x - eq.x)) <= 1e-9
        assert np.max(np.abs(y - eq.y)) <= 1e-9

    def test_dae_convergence_order(self, ieee14, ieee14_pf):
        """Deterministic load ramp: error against a fine reference shrinks ~4x per
        halving once h resolves the fast exciter modes (T_A = 0.04 s)."""
        n_loads = len(load_buses(ieee14))

        def run(h):
            cfg = SimulationConfig(t_end=1.0, h=h, newton_tol=1e-12, load_model=QUIET)
            t = np.arange(1, cfg.n_steps + 1) * h
            mult = np.tile((1.0 + 0.05 * np.sin(2.0 * t))[:, None], (1, n_loads))
            tr = run_simulation(ieee14, None, cfg, multipliers=mult, pf=ieee14_pf)
            return tr.x[-1]

        ref = run(0.2 / 1024)
        errs = [np.max(np.abs(run(0.2 / n) - ref)) for n in (32, 64)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)

    def test_newton_failure_raises(self, ieee14, ieee14_pf):
        n = len(load_buses(ieee14))
        mult = np.full((5, n), 60.0)
        cfg = SimulationConfig(t_end=1.0, h=0.2, newton_max_iter=5)
        with pytest.raises(SimulationError) as info:
            run_simulation(ieee14, None, cfg, multipliers=mult, pf=ieee14_pf)
        assert info.value.step == 1


class TestRunSimulation:
    def test_grid(self, ieee14, ieee14_pf):
        tr = run_simulation(ieee14, None, SimulationConfig(seed=3), pf=ieee14_pf)
        assert len(tr.time) == 151
        assert np.all(np.diff(tr.time) > 0)
        assert tr.v.shape == (151, 14) and tr.omega.shape == (151, 5)
        assert np.all(tr.multipliers[0] == 1.0)

    def test_equilibrium_hold(self, ieee14, ieee14_pf):
        tr = run_simulation(ieee14, None, SimulationConfig(load_model=QUIET), pf=ieee14_pf)
        assert np.max(np.abs(tr.x - tr.x[0])) <= 1e-6
        assert np.max(np.abs(tr.y - tr.y[0])) <= 1e-6
        assert evaluate_objective(tr).y <= 1e-5

    def test_bitwise_determinism(self, ieee14, ieee14_pf):
        cfg = SimulationConfig(seed=11)
        params = {"K_A2": 300.0}
        a = run_simulation(ieee14, params, cfg, pf=ieee14_pf)
        b = run_simulation(ieee14, params, cfg)
        assert a.to_csv() == b.to_csv()
        assert a.x.tobytes() == b.x.tobytes()

    def test_fd_jacobian_route_agrees(self, ieee14, ieee14_pf):
        a = run_simulation(ieee14, None, SimulationConfig(seed=2, t_end=4.0), pf=ieee14_pf)
        b = run_simulation(ieee14, None, SimulationConfig(seed=2, t_end=4.0, jacobian="fd"),
                           pf=ieee14_pf)
        np.testing.assert_allclose(a.x, b.x, atol=1e-7)

    def test_params_recorded(self, ieee14, ieee14_pf):
        tr = run_simulation(ieee14, {"K_A1": 250.0}, SimulationConfig(t_end=1.0),
                            pf=ieee14_pf)
        assert tr.params["K_A1"] == 250.0 and tr.params["K_A2"] == 400.0

    def test_csv_and_sidecar(self, ieee14, ieee14_pf):
        cfg = SimulationConfig(t_end=1.0, seed=4)
        tr = run_simulation(ieee14, None, cfg, pf=ieee14_pf)
        lines = tr.to_csv().splitlines()
        assert lines[0].startswith("t,V_1,V_2")
        assert len(lines) == 1 + 6  # header + t = 0, 0.2, ..., 1.0
        side = tr.sidecar(cfg)
        assert side["seed"] == 4 and side["steps"] == 5


class TestDroop:
    @pytest.mark.parametrize("r_droop,step", [(0.05, 0.1), (0.04, 0.2), (0.08, -0.15)])
    def test_isolated_generator_speed_deviation(self, r_droop, step):
        case = case_from_dict(isolated_generator_doc(p_load=0.5, r_droop=r_droop))
        cfg = SimulationConfig(t_end=60.0, h=0.05, load_model=QUIET)
        mult = np.full((cfg.n_steps, 1), 1.0 + step / 0.5)
        tr = run_simulation(case, None, cfg, multipliers=mult)
        dw = tr.omega[-1, 0] - 1.0
        expected = -r_droop * step  # machine base equals system base here
        assert dw == pytest.approx(expected, rel=0.01)


def _fake_trace(errors_v, errors_w, h=0.2):
    """Trace whose channel errors are given (steps+1 rows each)."""
    n = len(errors_v[0])
    t = np.arange(n) * h
    v = np.column_stack([1.0 + np.asarray(e) for e in errors_v])
    w = np.column_stack([1.0 + np.asarray(e) for e in errors_w]) if errors_w else \
        np.ones((n, 0))
    m = len(errors_v)
    omega = np.ones((n, m))
    omega[:, : w.shape[1]] = w
    return SimulationTrace(time=t, bus_ids=list(range(1, m + 1)),
                           machine_buses=list(range(1, m + 1)), v=v, omega=omega,
                           x=np.zeros((n, 1)), y=np.zeros((n, 1)), multipliers=np.ones((n, 0)),
                           load_buses=[], seed=0, params={},
                           gov_buses=list(range(1, w.shape[1] + 1)))


class TestObjective:
    def test_constant_error(self):
        err = np.r_[0.0, np.full(150, 0.1)]
        tr = _fake_trace([err], [])
        s = evaluate_objective(tr, ObjectiveSpec({"V_1": 1.0}))
        assert s.iae["V_1"] == pytest.approx(3.0, rel=1e-12)
        assert s.y == pytest.approx(3.0, rel=1e-12)

    def test_uniform_average(self):
        e1 = np.r_[0.0, np.full(150, 1.0 / 30.0)]
        e2 = np.r_[0.0, np.full(150, 3.0 / 30.0)]
        tr = _fake_trace([e1, e2], [])
        s = evaluate_objective(tr)
        assert s.iae["V_1"] == pytest.approx(1.0) and s.iae["V_2"] == pytest.approx(3.0)
        assert s.y == pytest.approx(2.0, rel=1e-12)

    def test_ieee14_has_seven_channels(self, ieee14, ieee14_pf):
        tr = run_simulation(ieee14, None, SimulationConfig(t_end=1.0), pf=ieee14_pf)
        w = ObjectiveSpec().resolve(tr)
        assert len(w) == 7
        assert sum(w.values()) == pytest.approx(1.0, abs=1e-12)
        assert {"omega_1", "omega_2"} <= set(w)

    def test_bad_weights(self):
        tr = _fake_trace([np.zeros(5)], [])
        with pytest.raises(ValueError):
            evaluate_objective(tr, ObjectiveSpec({"V_1": 0.5}))
        with pytest.raises(ValueError):
            evaluate_objective(tr, ObjectiveSpec({"V_9": 1.0}))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 0.1), st.floats(-0.1, -1e-6)),
                    min_size=10, max_size=10).filter(any),
           st.floats(0.1, 0.99))
    def test_nonnegative_and_monotone(self, errs, shrink):
        e = np.r_[0.0, errs]
        a = evaluate_objective(_fake_trace([e], [e]))
        b = evaluate_objective(_fake_trace([e * shrink], [e * shrink]))
        assert a.y >= 0.0 and b.y >= 0.0
        assert b.y < a.y


class TestReplicates:
    def test_twenty_distinct_seeds(self, ieee14):
        cfg = SimulationConfig(t_end=2.0, seed=100)
        samples = run_replicates(ieee14, None, 20, cfg)
        assert len(samples) == 20
        assert len({s.seed for s in samples}) == 20
        assert [s.seed for s in samples] == list(range(100, 120))

    def test_single_equals_direct(self, ieee14):
        cfg = SimulationConfig(t_end=2.0, seed=7)
        (s,) = run_replicates(ieee14, {"R_1": 0.04}, 1, cfg)
        direct = evaluate_objective(run_simulation(ieee14, {"R_1": 0.04}, cfg))
        assert s == direct

    def test_threads_identical(self, ieee14):
        cfg = SimulationConfig(t_end=2.0, seed=5)
        serial = run_replicates(ieee14, None, 6, cfg, threads=1)
        parallel = run_replicates(ieee14, None, 6, cfg, threads=3)
        assert serial == parallel
