from __future__ import annotations

import copy

import numpy as np
import pytest

from gentune.case_model import case_from_dict, load_bundled_case, solve_power_flow

AVR = {"k_a": 400.0, "t_a": 0.04, "k_e": 1.0, "t_e": 0.8, "k_f": 0.03, "t_f": 1.0,
       "vr_min": -7.3, "vr_max": 7.3, "s_e": [[2.8, 0.04], [3.73, 0.33]]}
GOV = {"r_droop": 0.05, "t_sv": 0.2, "t_ch": 0.3, "psv_min": 0.0, "psv_max": 1.0}


def machine(bus: int, role: str = "generator", **over) -> dict:
    m = {"bus": bus, "role": role, "mva": 100.0, "h": 5.0, "d": 2.0, "xd": 1.0, "xq": 0.9,
         "xd_p": 0.25, "xq_p": 0.25, "td0_p": 6.0, "tq0_p": 0.5, "avr": dict(AVR)}
    if role == "generator":
        m["gov"] = dict(GOV)
    m.update(over)
    return m


def two_bus_doc(p_load: float = 0.1, q_load: float = 0.0, x: float = 0.1) -> dict:
    return {
        "name": "two-bus", "base_mva": 100.0, "omega_s": 2 * np.pi * 60,
        "buses": [{"id": 1, "kind": "slack", "v_setpoint": 1.0},
                  {"id": 2, "kind": "pq", "p_load0": p_load, "q_load0": q_load}],
        "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.0, "x": x}],
        "machines": [],
    }


def isolated_generator_doc(p_load: float = 0.5, r_droop: float = 0.05) -> dict:
    """One bus: a governed generator serving a constant-power load, D = 0."""
    gov = dict(GOV, r_droop=r_droop)
    return {
        "name": "isolated", "base_mva": 100.0, "omega_s": 2 * np.pi * 60,
        "buses": [{"id": 1, "kind": "slack", "v_setpoint": 1.0, "p_load0": p_load,
                   "q_load0": 0.0}],
        "branches": [],
        "machines": [machine(1, d=0.0, gov=gov)],
        "tunable_map": {"A": "K_A1", "B": "R_1"},
    }


def reference_surface_coefficients() -> dict:
    """Reference quadratic-cubic surface over (K_A2, K_A1)."""
    return {"1": 0.0518, "x1": -4.5868e-5, "x2": -1.4479e-4, "x2^2": 1.6678e-7,
            "x1^2*x2": 1.8613e-10}


@pytest.fixture(scope="session")
def ieee14():
    return load_bundled_case()


@pytest.fixture(scope="session")
def ieee14_pf(ieee14):
    return solve_power_flow(ieee14)


@pytest.fixture
def two_bus():
    return case_from_dict(two_bus_doc())


@pytest.fixture
def isolated():
    return case_from_dict(isolated_generator_doc())


@pytest.fixture
def doc_copy():
    return copy.deepcopy


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str, status: str | None = None) -> None:
    """Record one acceptance line; printed in the terminal summary."""
    status = status or ("PASS" if ok else "FAIL")
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {status}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
