from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gentune.case_model import case_from_dict, initialize_equilibrium
from gentune.dynamics import (
    ControlInputs,
    DynamicModel,
    Layout,
    LoadSnapshot,
    SystemState,
    algebraic_residual,
    apply_limits,
    differential_residual,
    saturation,
)

from conftest import two_bus_doc


@pytest.fixture(scope="module")
def eq14(ieee14, ieee14_pf):
    eq = initialize_equilibrium(ieee14, ieee14_pf)
    model = DynamicModel(ieee14, v0=eq.v0)
    u = ControlInputs(eq.v_ref, eq.p_c, eq.t_m0)
    return ieee14, eq, model, u


class TestLayout:
    def test_sizes(self, ieee14):
        lay = Layout.for_case(ieee14)
        assert lay.n_x == 7 * 5 + 2 * 2
        assert lay.n_y == 2 * 14 + 2 * 5
        assert len(lay.names()) == lay.n_x + lay.n_y

    def test_pack_unpack_bitwise(self, eq14):
        case, eq, model, _ = eq14
        state = SystemState.unpack(model.layout, eq.x, eq.y)
        x, y = state.pack()
        assert x.tobytes() == eq.x.tobytes()
        assert y.tobytes() == eq.y.tobytes()
        z = state.to_vector()
        assert SystemState.from_vector(model.layout, z).to_vector().tobytes() == z.tobytes()

    def test_unpack_dimension_mismatch(self, eq14):
        _, eq, model, _ = eq14
        with pytest.raises(ValueError, match="dimension"):
            SystemState.unpack(model.layout, eq.x[:-1], eq.y)


class TestDifferential:
    def test_equilibrium(self, eq14):
        case, eq, _, u = eq14
        state = SystemState.unpack(Layout.for_case(case), eq.x, eq.y)
        assert np.max(np.abs(differential_residual(state, u, case))) <= 1e-8

    def test_eq_p_perturbation_with_frozen_currents(self, eq14):
        case, eq, model, u = eq14
        lay = model.layout
        x = eq.x.copy()
        x[lay.eq_p.start] += 0.1
        d = model.f(x, eq.y, u)
        assert d[lay.eq_p.start] == pytest.approx(-0.1 / case.machines[0].td0_p, abs=1e-10)

    def test_droop_feedback_term(self, eq14):
        case, eq, model, u = eq14
        lay = model.layout
        delta = 1e-3
        x = eq.x.copy()
        x[lay.omega.start] += delta  # machine 0 carries governor 0
        d0 = model.f(eq.x, eq.y, u)[lay.psv.start]
        d1 = model.f(x, eq.y, u)[lay.psv.start]
        gov = case.machines[0].gov
        assert d1 - d0 == pytest.approx(-(delta / gov.r_droop) / gov.t_sv, rel=1e-12)

    def test_torque_forms_agree(self, eq14):
        _, eq, model, _ = eq14
        lay = model.layout
        assert np.array_equal(model.xq_p, model.xd_p)
        i_d, i_q = eq.y[lay.i_d], eq.y[lay.i_q]
        short = eq.x[lay.ed_p] * i_d + eq.x[lay.eq_p] * i_q
        assert np.array_equal(model.electrical_torque(eq.x, eq.y), short)


class TestAlgebraic:
    def test_equilibrium(self, eq14):
        case, eq, model, _ = eq14
        state = SystemState.unpack(model.layout, eq.x, eq.y)
        r = algebraic_residual(state, LoadSnapshot.base(case), model.ybus, case)
        assert np.max(np.abs(r)) <= 1e-8

    def test_load_scaling_shifts_p_balance(self, eq14):
        case, eq, model, _ = eq14
        state = SystemState.unpack(model.layout, eq.x, eq.y)
        base = LoadSnapshot.base(case)
        eps = 0.03
        i = case.bus_index[4]
        mult = np.ones(len(case.buses))
        mult[i] += eps
        r0 = algebraic_residual(state, base, model.ybus, case)
        r1 = algebraic_residual(state, base.scaled(mult), model.ybus, case)
        m, n = len(case.machines), len(case.buses)
        p_row, q_row = 2 * m + i, 2 * m + n + i
        assert r1[p_row] - r0[p_row] == pytest.approx(-eps * case.buses[i].p_load0, abs=1e-15)
        assert r1[q_row] - r0[q_row] == pytest.approx(-eps * case.buses[i].q_load0, abs=1e-15)
        others = np.delete(np.arange(len(r0)), [p_row, q_row])
        np.testing.assert_array_equal(r1[others], r0[others])

    def test_empty_injections_flat(self):
        doc = two_bus_doc(p_load=0.0)
        case = case_from_dict(doc)
        lay = Layout.for_case(case)
        y = np.zeros(lay.n_y)
        y[lay.v] = 1.0
        state = SystemState.unpack(lay, np.zeros(lay.n_x), y)
        model = DynamicModel(case)
        r = algebraic_residual(state, LoadSnapshot.base(case), model.ybus, case)
        np.testing.assert_allclose(r, 0.0, atol=1e-15)


class TestJacobian:
    def _check(self, model, x, y, u, loads):
        an = model.jacobians(x, y, u, loads)
        fd = model.jacobians_fd(x, y, u, loads)
        for a, b in zip(an, fd):
            scale = max(1.0, float(np.max(np.abs(a))))
            np.testing.assert_allclose(a, b, atol=1e-5 * scale)

    def test_at_equilibrium(self, eq14):
        case, eq, model, u = eq14
        self._check(model, eq.x, eq.y, u, LoadSnapshot.base(case))

    def test_perturbed_voltage_dependent_loads(self, eq14):
        case, eq, _, u = eq14
        model = DynamicModel(case, v0=eq.v0, load_exponent=2.0)
        rng = np.random.default_rng(3)
        x = eq.x + 1e-2 * rng.standard_normal(eq.x.shape)
        y = eq.y + 1e-2 * rng.standard_normal(eq.y.shape)
        x[model.layout.efd] = 3.2  # inside the saturation region
        self._check(model, x, y, u, LoadSnapshot.base(case).scaled(np.full(14, 1.05)))


class TestLimits:
    def test_inside_is_noop(self, eq14):
        case, eq, model, _ = eq14
        state = SystemState.unpack(model.layout, eq.x, eq.y)
        out, flags = apply_limits(state, case)
        assert flags == []
        assert out.to_vector().tobytes() == state.to_vector().tobytes()

    def test_vr_clamped(self, eq14):
        case, eq, model, _ = eq14
        lay = model.layout
        x = eq.x.copy()
        x[lay.vr.start + 1] = 50.0
        out, flags = apply_limits(SystemState.unpack(lay, x, eq.y), case)
        assert out.vr[1] == case.machines[1].avr.vr_max
        assert flags == [f"vr_max@bus{case.machines[1].bus}"]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=7, max_size=7))
    def test_idempotent_and_order_independent(self, eq14, values):
        case, eq, model, _ = eq14
        lay = model.layout
        x = eq.x.copy()
        x[lay.vr] = values[:5]
        x[lay.psv] = values[5:]
        once, _ = model.clamp(x)
        twice, flags2 = model.clamp(once)
        assert np.array_equal(once, twice) and flags2 == []
        # clamping each machine on its own gives the same result as all at once
        for sl in (lay.vr, lay.psv):
            for j in range(sl.start, sl.stop):
                single = eq.x.copy()
                single[j] = x[j]
                assert model.clamp(single)[0][j] == once[j]


def test_saturation_curve(ieee14):
    avr = ieee14.machines[0].avr
    a, b = avr.saturation_coefficients()
    for e, se in avr.s_e:
        assert saturation(avr, e) == pytest.approx(se, rel=1e-12)
    assert saturation(avr, 0.5 * a) == 0.0
