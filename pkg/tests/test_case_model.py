from __future__ import annotations

import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gentune.case_model import (
    CaseError,
    build_admittance,
    case_from_dict,
    case_to_dict,
    initialize_equilibrium,
    parse_case,
    serialize_case,
    solve_power_flow,
)
from gentune.dynamics import ControlInputs, DynamicModel, LoadSnapshot

from conftest import isolated_generator_doc, machine, two_bus_doc

# Published AC solution of the 14-bus test system (|V| p.u., angle deg).
IEEE14_V = [1.060, 1.045, 1.010, 1.018, 1.020, 1.070, 1.062, 1.090, 1.056, 1.051, 1.057,
            1.055, 1.050, 1.036]
IEEE14_ANG = [0.0, -4.98, -12.72, -10.33, -8.78, -14.22, -13.37, -13.36, -14.94, -15.10,
              -14.79, -15.08, -15.16, -16.03]


class TestParse:
    def test_minimal_two_bus(self):
        case = parse_case(json.dumps(two_bus_doc()))
        assert len(case.buses) == 2
        assert len(case.branches) == 1
        assert len(case.machines) == 0

    def test_bundled_ieee14(self, ieee14):
        assert len(ieee14.buses) == 14
        assert len(ieee14.machines) == 5
        assert sum(m.gov is not None for m in ieee14.machines) == 2
        assert sorted(ieee14.tunable_map) == list("ABCDEFG")

    def test_normal_values(self, ieee14):
        p = ieee14.params()
        assert p["K_A8"] == p["K_A6"] == p["K_A3"] == 400.0
        assert p["R_1"] == p["R_2"] == 0.05

    def test_two_slack_buses(self):
        doc = two_bus_doc()
        doc["buses"][1] = {"id": 2, "kind": "slack", "v_setpoint": 1.0}
        with pytest.raises(CaseError, match="multiple slack buses"):
            case_from_dict(doc)

    def test_missing_slack(self):
        doc = two_bus_doc()
        doc["buses"][0] = {"id": 1, "kind": "pq"}
        with pytest.raises(CaseError, match="missing slack bus"):
            case_from_dict(doc)

    def test_unknown_key_reports_locus(self):
        doc = two_bus_doc()
        doc["branches"][0]["colour"] = "red"
        with pytest.raises(CaseError) as info:
            case_from_dict(doc)
        assert "branches[0]" in str(info.value)

    def test_condenser_with_governor_rejected(self):
        doc = isolated_generator_doc()
        doc["machines"][0]["role"] = "condenser"
        with pytest.raises(CaseError):
            case_from_dict(doc)

    def test_generator_needs_governor(self):
        doc = isolated_generator_doc()
        del doc["machines"][0]["gov"]
        with pytest.raises(CaseError):
            case_from_dict(doc)

    def test_machine_on_pq_bus_rejected(self):
        doc = two_bus_doc()
        doc["machines"] = [machine(2)]
        with pytest.raises(CaseError):
            case_from_dict(doc)

    def test_duplicate_bus(self):
        doc = two_bus_doc()
        doc["buses"][1]["id"] = 1
        with pytest.raises(CaseError, match="duplicate"):
            case_from_dict(doc)

    def test_round_trip(self, ieee14):
        again = parse_case(serialize_case(ieee14))
        assert again == ieee14
        assert case_to_dict(again) == case_to_dict(ieee14)

    def test_with_params(self, ieee14):
        tuned = ieee14.with_params({"K_A2": 330.1, "R_1": 0.07})
        assert tuned.get_param("K_A2") == 330.1
        assert tuned.get_param("R_1") == 0.07
        assert ieee14.get_param("K_A2") == 400.0
        with pytest.raises(KeyError):
            ieee14.with_params({"R_3": 0.05})  # condenser has no governor


class TestAdmittance:
    def test_single_branch(self):
        doc = two_bus_doc()
        y = build_admittance(case_from_dict(doc))
        np.testing.assert_allclose(y, [[-10j, 10j], [10j, -10j]], atol=1e-12)

    def test_no_branches_shunt_only(self):
        doc = two_bus_doc()
        doc["branches"] = []
        doc["buses"][1]["shunt_b"] = 0.19
        y = build_admittance(case_from_dict(doc))
        np.testing.assert_array_equal(y, np.diag([0.0, 0.19j]))

    def test_ieee14_symmetric_without_taps(self, ieee14):
        doc = case_to_dict(ieee14)
        for br in doc["branches"]:
            br["tap"] = 1.0
        y = build_admittance(case_from_dict(doc))
        assert y.shape == (14, 14)
        for i in range(14):
            for j in range(14):
                assert y[i, j] == y[j, i]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.0, 0.1), st.floats(0.01, 0.5), st.floats(0, 0.1)),
                    min_size=1, max_size=4))
    def test_symmetry_property(self, lines):
        doc = two_bus_doc()
        doc["buses"].append({"id": 3, "kind": "pq"})
        pairs = [(1, 2), (2, 3), (1, 3)]
        doc["branches"] = [{"from_bus": pairs[i % 3][0], "to_bus": pairs[i % 3][1],
                            "r": r, "x": x, "b_charging": b}
                           for i, (r, x, b) in enumerate(lines)]
        y = build_admittance(case_from_dict(doc))
        assert np.array_equal(y, y.T)


class TestPowerFlow:
    def test_unloaded_flat(self):
        pf = solve_power_flow(case_from_dict(two_bus_doc(p_load=0.0)))
        np.testing.assert_allclose(pf.v, [1.0, 1.0], atol=1e-14)
        assert pf.iterations == 0

    def test_two_bus_closed_form(self):
        # With Q = 0 over a lossless line, V = cos(theta) and P x = -sin(2 theta)/2.
        p, x = 0.1, 0.1
        theta = -0.5 * math.asin(2 * p * x)
        pf = solve_power_flow(case_from_dict(two_bus_doc(p, 0.0, x)))
        assert pf.v_mag[1] == pytest.approx(math.cos(theta), abs=1e-10)
        assert pf.v_ang[1] == pytest.approx(theta, abs=1e-10)

    def test_ieee14_converges(self, ieee14, ieee14_pf):
        assert ieee14_pf.mismatch_norm <= 1e-8
        assert ieee14_pf.iterations <= 10

    def test_ieee14_residual_recomputed(self, ieee14, ieee14_pf):
        y = build_admittance(ieee14)
        v = ieee14_pf.v
        s = v * np.conj(y @ v)
        for i, b in enumerate(ieee14.buses):
            if b.kind == "slack":
                continue
            p_spec = b.p_gen - b.p_load0
            assert s[i].real == pytest.approx(p_spec, abs=1e-8)
            if b.kind == "pq":
                assert s[i].imag == pytest.approx(-b.q_load0, abs=1e-8)
            else:
                assert abs(v[i]) == pytest.approx(b.v_setpoint, abs=1e-12)

    def test_ieee14_matches_published_solution(self, ieee14_pf):
        np.testing.assert_allclose(ieee14_pf.v_mag, IEEE14_V, atol=1.5e-3)
        np.testing.assert_allclose(np.degrees(ieee14_pf.v_ang), IEEE14_ANG, atol=0.02)


class TestEquilibrium:
    def test_condensers_have_no_mechanical_power(self, ieee14, ieee14_pf):
        eq = initialize_equilibrium(ieee14, ieee14_pf)
        for k, m in enumerate(ieee14.machines):
            if m.role == "condenser":
                assert eq.t_m0[k] == pytest.approx(0.0, abs=1e-9)
        assert len(eq.p_c) == 2

    def test_no_load_machine_aligned(self):
        doc = isolated_generator_doc(p_load=0.0)
        case = case_from_dict(doc)
        eq = initialize_equilibrium(case, solve_power_flow(case))
        model = DynamicModel(case, v0=eq.v0)
        lay = model.layout
        assert eq.x[lay.delta][0] == pytest.approx(0.0, abs=1e-12)
        assert eq.x[lay.omega][0] == 1.0

    def test_ieee14_residuals(self, ieee14, ieee14_pf):
        eq = initialize_equilibrium(ieee14, ieee14_pf)
        model = DynamicModel(ieee14, v0=eq.v0)
        u = ControlInputs(eq.v_ref, eq.p_c, eq.t_m0)
        assert np.max(np.abs(model.f(eq.x, eq.y, u))) <= 1e-8
        assert np.max(np.abs(model.g(eq.x, eq.y, LoadSnapshot.base(ieee14)))) <= 1e-8

    def test_condenser_with_active_power_rejected(self, ieee14):
        doc = case_to_dict(ieee14)
        bus3 = next(b for b in doc["buses"] if b["id"] == 3)
        bus3["p_gen"] = 0.2
        case = case_from_dict(doc)
        with pytest.raises(CaseError):
            initialize_equilibrium(case, solve_power_flow(case))


def test_doc_not_mutated():
    doc = two_bus_doc()
    snapshot = copy.deepcopy(doc)
    case_from_dict(doc)
    assert doc == snapshot
