"""Power-system case description, network admittance, power flow and
steady-state initialization of the machine/controller dynamic model.

Case files are JSON documents (see ``docs/case-schema.md``). Network data is
per-unit on ``base_mva``; machine reactances, inertia and damping are per-unit
on each machine's own ``mva`` rating, as they appear in manufacturer data
sheets. The conversion to system base happens in :mod:`gentune.dynamics`.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from typing import Any, Mapping

import numpy as np

__all__ = [
    "AvrParams",
    "BranchRecord",
    "BusRecord",
    "CaseError",
    "EquilibriumState",
    "GovParams",
    "MachineRecord",
    "PowerFlowError",
    "PowerFlowSolution",
    "PowerSystemCase",
    "build_admittance",
    "initialize_equilibrium",
    "load_bundled_case",
    "parse_case",
    "serialize_case",
    "solve_power_flow",
]


class CaseError(ValueError):
    """Invalid case content. ``locus`` names the offending line or field."""

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch_norm: float, iterations: int):
        self.mismatch_norm = mismatch_norm
        self.iterations = iterations
        super().__init__(f"{message} (mismatch {mismatch_norm:.3e} after {iterations} iterations)")


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str  # "slack" | "pv" | "pq"
    p_load0: float = 0.0
    q_load0: float = 0.0
    shunt_b: float = 0.0
    v_setpoint: float | None = None
    p_gen: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class AvrParams:
    """IEEE Type I exciter. ``s_e`` holds (E_fd, S_E) saturation points."""

    k_a: float
    t_a: float
    k_e: float
    t_e: float
    k_f: float
    t_f: float
    vr_min: float
    vr_max: float
    s_e: tuple[tuple[float, float], ...] = ()

    def saturation_coefficients(self) -> tuple[float, float]:
        """Return (A, B) of ``S_E(E) = B*(E - A)**2`` for ``E > A``, else 0.

        The curve passes through the two given saturation points. With no
        points the exciter is unsaturated (B = 0).
        """
        if not self.s_e:
            return 0.0, 0.0
        (e1, s1), (e2, s2) = self.s_e
        if s1 <= 0.0 and s2 <= 0.0:
            return 0.0, 0.0
        r = math.sqrt(s1 / s2)
        a = (e1 - r * e2) / (1.0 - r)
        b = s2 / (e2 - a) ** 2
        return a, b


@dataclass(frozen=True)
class GovParams:
    r_droop: float
    t_sv: float
    t_ch: float
    psv_min: float = 0.0
    psv_max: float = 1.0


@dataclass(frozen=True)
class MachineRecord:
    bus: int
    role: str  # "generator" | "condenser"
    h: float
    d: float
    xd: float
    xq: float
    xd_p: float
    xq_p: float
    td0_p: float
    tq0_p: float
    avr: AvrParams
    gov: GovParams | None = None
    mva: float | None = None


_TUNABLE_RE = re.compile(r"^(K_A|R_)(\d+)$")


@dataclass(frozen=True)
class PowerSystemCase:
    base_mva: float
    omega_s: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    machines: tuple[MachineRecord, ...]
    tunable_map: Mapping[str, str] = field(default_factory=dict)
    name: str = ""

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def machine_at(self, bus: int) -> MachineRecord:
        for m in self.machines:
            if m.bus == bus:
                return m
        raise KeyError(f"no machine at bus {bus}")

    def get_param(self, name: str) -> float:
        kind, bus = _parse_param_name(name)
        m = self.machine_at(bus)
        if kind == "K_A":
            return m.avr.k_a
        if m.gov is None:
            raise KeyError(f"{name}: machine at bus {bus} has no governor")
        return m.gov.r_droop

    def params(self) -> dict[str, float]:
        """Current values of every tunable parameter, keyed by name."""
        return {name: self.get_param(name) for name in self.tunable_map.values()}

    def with_params(self, values: Mapping[str, float]) -> PowerSystemCase:
        """Copy of the case with tunable parameters (``K_A2``, ``R_1``...) replaced."""
        machines = list(self.machines)
        for name, value in values.items():
            kind, bus = _parse_param_name(name)
            idx = next((i for i, m in enumerate(machines) if m.bus == bus), None)
            if idx is None:
                raise KeyError(f"{name}: no machine at bus {bus}")
            m = machines[idx]
            if kind == "K_A":
                machines[idx] = replace(m, avr=replace(m.avr, k_a=float(value)))
            else:
                if m.gov is None:
                    raise KeyError(f"{name}: machine at bus {bus} has no governor")
                if value <= 0:
                    raise ValueError(f"{name} must be positive")
                machines[idx] = replace(m, gov=replace(m.gov, r_droop=float(value)))
        return replace(self, machines=tuple(machines))


def _parse_param_name(name: str) -> tuple[str, int]:
    match = _TUNABLE_RE.match(name)
    if not match:
        raise KeyError(f"unknown tunable parameter {name!r} (expected K_A<bus> or R_<bus>)")
    return match.group(1), int(match.group(2))


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray  # complex bus voltages, case bus order
    mismatch_norm: float
    iterations: int
    s_injection: np.ndarray  # net complex injection V*conj(Y V)

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def v_ang(self) -> np.ndarray:
        return np.angle(self.v)


@dataclass(frozen=True)
class EquilibriumState:
    """Steady state at t = 0 together with the controller set points.

    ``x`` and ``y`` are the packed differential and algebraic vectors in the
    layout of :class:`gentune.dynamics.Layout`.
    """

    x: np.ndarray
    y: np.ndarray
    v_ref: np.ndarray  # per machine
    p_c: np.ndarray  # per governor
    t_m0: np.ndarray  # per machine, machine base
    efd0: np.ndarray  # per machine
    v0: np.ndarray  # power-flow bus voltage magnitudes


# ---------------------------------------------------------------------------
# Parsing / serialization

_BUS_KEYS = {f.name for f in fields(BusRecord)}
_BRANCH_KEYS = {f.name for f in fields(BranchRecord)}
_MACHINE_KEYS = {f.name for f in fields(MachineRecord)}
_AVR_KEYS = {f.name for f in fields(AvrParams)}
_GOV_KEYS = {f.name for f in fields(GovParams)}
_TOP_KEYS = {"base_mva", "omega_s", "buses", "branches", "machines", "tunable_map", "name"}
_REQUIRED_TOP = {"base_mva", "omega_s", "buses", "branches", "machines"}


def _check_keys(obj: Any, allowed: set[str], required: set[str], locus: str) -> None:
    if not isinstance(obj, dict):
        raise CaseError("expected an object", locus)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise CaseError(f"unknown field(s) {', '.join(unknown)}", locus)
    missing = sorted(required - set(obj))
    if missing:
        raise CaseError(f"missing field(s) {', '.join(missing)}", locus)


def _num(obj: dict, key: str, locus: str, positive: bool = False) -> float:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise CaseError("expected a finite number", f"{locus}.{key}")
    if positive and value <= 0:
        raise CaseError("must be > 0", f"{locus}.{key}")
    return float(value)


def _parse_avr(obj: Any, locus: str) -> AvrParams:
    _check_keys(obj, _AVR_KEYS, _AVR_KEYS - {"s_e"}, locus)
    vals = {k: _num(obj, k, locus, positive=k in ("t_a", "t_e", "t_f")) for k in _AVR_KEYS - {"s_e"}}
    if vals["vr_min"] >= vals["vr_max"]:
        raise CaseError("vr_min must be < vr_max", locus)
    s_e = obj.get("s_e", [])
    if not isinstance(s_e, list) or len(s_e) not in (0, 2):
        raise CaseError("expected zero or two [E_fd, S_E] pairs", f"{locus}.s_e")
    pairs = []
    for i, pair in enumerate(s_e):
        if not isinstance(pair, list) or len(pair) != 2:
            raise CaseError("expected [E_fd, S_E]", f"{locus}.s_e[{i}]")
        pairs.append((float(pair[0]), float(pair[1])))
    if pairs and not (pairs[0][0] < pairs[1][0] and 0 <= pairs[0][1] < pairs[1][1]):
        raise CaseError("saturation points must increase in E_fd and S_E", f"{locus}.s_e")
    return AvrParams(s_e=tuple(pairs), **vals)


def _parse_gov(obj: Any, locus: str) -> GovParams:
    _check_keys(obj, _GOV_KEYS, {"r_droop", "t_sv", "t_ch"}, locus)
    vals = {k: _num(obj, k, locus, positive=k in ("r_droop", "t_sv", "t_ch")) for k in obj}
    gov = GovParams(**vals)
    if gov.psv_min >= gov.psv_max:
        raise CaseError("psv_min must be < psv_max", locus)
    return gov


def _parse_machine(obj: Any, locus: str) -> MachineRecord:
    _check_keys(obj, _MACHINE_KEYS, _MACHINE_KEYS - {"gov", "mva"}, locus)
    role = obj["role"]
    if role not in ("generator", "condenser"):
        raise CaseError(f"unknown role {role!r}", f"{locus}.role")
    positive = {"h", "td0_p", "tq0_p", "xd", "xq", "xd_p", "xq_p"}
    vals = {k: _num(obj, k, locus, positive=k in positive) for k in positive | {"d"}}
    if vals["xd"] < vals["xd_p"]:
        raise CaseError("xd must be >= xd_p", locus)
    gov = None
    if "gov" in obj and obj["gov"] is not None:
        if role == "condenser":
            raise CaseError("condenser declared with governor", f"{locus}.gov")
        gov = _parse_gov(obj["gov"], f"{locus}.gov")
    elif role == "generator":
        raise CaseError("generator requires a governor", locus)
    mva = _num(obj, "mva", locus, positive=True) if obj.get("mva") is not None else None
    bus = obj["bus"]
    if not isinstance(bus, int) or isinstance(bus, bool):
        raise CaseError("expected an integer bus id", f"{locus}.bus")
    return MachineRecord(bus=bus, role=role, avr=_parse_avr(obj["avr"], f"{locus}.avr"),
                         gov=gov, mva=mva, **vals)


def case_from_dict(doc: Any) -> PowerSystemCase:
    """Validate a decoded case document and build the case."""
    _check_keys(doc, _TOP_KEYS, _REQUIRED_TOP, "case")
    base_mva = _num(doc, "base_mva", "case", positive=True)
    omega_s = _num(doc, "omega_s", "case", positive=True)

    buses = []
    seen: set[int] = set()
    for i, b in enumerate(doc["buses"]):
        locus = f"buses[{i}]"
        _check_keys(b, _BUS_KEYS, {"id", "kind"}, locus)
        if not isinstance(b["id"], int) or isinstance(b["id"], bool):
            raise CaseError("expected an integer id", f"{locus}.id")
        if b["id"] in seen:
            raise CaseError(f"duplicate bus id {b['id']}", f"{locus}.id")
        seen.add(b["id"])
        if b["kind"] not in ("slack", "pv", "pq"):
            raise CaseError(f"unknown bus kind {b['kind']!r}", f"{locus}.kind")
        vals = {k: _num(b, k, locus) for k in ("p_load0", "q_load0", "shunt_b", "p_gen") if k in b}
        v_set = None
        if b["kind"] in ("slack", "pv"):
            if "v_setpoint" not in b:
                raise CaseError("slack/pv bus requires v_setpoint", locus)
            v_set = _num(b, "v_setpoint", locus, positive=True)
        elif b.get("v_setpoint") is not None:
            raise CaseError("pq bus cannot carry v_setpoint", f"{locus}.v_setpoint")
        buses.append(BusRecord(id=b["id"], kind=b["kind"], v_setpoint=v_set, **vals))
    n_slack = sum(b.kind == "slack" for b in buses)
    if n_slack == 0:
        raise CaseError("missing slack bus", "buses")
    if n_slack > 1:
        raise CaseError("multiple slack buses", "buses")

    branches = []
    for i, br in enumerate(doc["branches"]):
        locus = f"branches[{i}]"
        _check_keys(br, _BRANCH_KEYS, {"from_bus", "to_bus", "r", "x"}, locus)
        vals = {k: _num(br, k, locus) for k in ("r", "x", "b_charging", "tap") if k in br}
        rec = BranchRecord(from_bus=br["from_bus"], to_bus=br["to_bus"], **vals)
        if rec.from_bus not in seen or rec.to_bus not in seen:
            raise CaseError("branch endpoint does not exist", locus)
        if rec.from_bus == rec.to_bus:
            raise CaseError("branch endpoints must differ", locus)
        if rec.r == 0.0 and rec.x == 0.0:
            raise CaseError("zero-impedance branch", locus)
        if rec.tap <= 0:
            raise CaseError("tap must be > 0", f"{locus}.tap")
        branches.append(rec)

    machines = []
    machine_buses: set[int] = set()
    for i, m in enumerate(doc["machines"]):
        rec = _parse_machine(m, f"machines[{i}]")
        if rec.bus not in seen:
            raise CaseError(f"machine bus {rec.bus} does not exist", f"machines[{i}].bus")
        if rec.bus in machine_buses:
            raise CaseError(f"second machine at bus {rec.bus}", f"machines[{i}].bus")
        kind = next(b.kind for b in buses if b.id == rec.bus)
        if kind == "pq":
            raise CaseError("machines must sit on slack or pv buses", f"machines[{i}].bus")
        machine_buses.add(rec.bus)
        machines.append(rec)

    tunable_map = doc.get("tunable_map", {})
    if not isinstance(tunable_map, dict):
        raise CaseError("expected an object", "case.tunable_map")
    case = PowerSystemCase(base_mva=base_mva, omega_s=omega_s, buses=tuple(buses),
                           branches=tuple(branches), machines=tuple(machines),
                           tunable_map=dict(tunable_map), name=str(doc.get("name", "")))
    for letter, name in tunable_map.items():
        if not re.fullmatch(r"[A-Z]", letter):
            raise CaseError("factor letters must be single capitals", f"tunable_map.{letter}")
        try:
            case.get_param(name)
        except KeyError as exc:
            raise CaseError(str(exc.args[0]), f"tunable_map.{letter}") from None
    return case


def parse_case(text: str) -> PowerSystemCase:
    """Parse and validate case-file content."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return case_from_dict(doc)


def case_to_dict(case: PowerSystemCase) -> dict[str, Any]:
    def clean(rec: Any) -> dict[str, Any]:
        d = asdict(rec)
        return {k: v for k, v in d.items() if v is not None}

    machines = []
    for m in case.machines:
        d = clean(m)
        d["avr"]["s_e"] = [list(p) for p in m.avr.s_e]
        machines.append(d)
    doc: dict[str, Any] = {}
    if case.name:
        doc["name"] = case.name
    doc.update(base_mva=case.base_mva, omega_s=case.omega_s,
               buses=[clean(b) for b in case.buses],
               branches=[clean(b) for b in case.branches],
               machines=machines, tunable_map=dict(case.tunable_map))
    return doc


def serialize_case(case: PowerSystemCase) -> str:
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def load_bundled_case(name: str = "ieee14") -> PowerSystemCase:
    text = resources.files("gentune.data").joinpath(f"{name}.json").read_text()
    return parse_case(text)


# ---------------------------------------------------------------------------
# Network


def build_admittance(case: PowerSystemCase) -> np.ndarray:
    """Dense complex bus-admittance matrix in case bus order.

    Transformer taps sit on the from-bus side (off-nominal ratio ``tap:1``).
    """
    n = len(case.buses)
    idx = case.bus_index
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        z = complex(br.r, br.x)
        if z == 0:
            raise CaseError("zero-impedance branch", f"branch {br.from_bus}-{br.to_bus}")
        ys = 1.0 / z
        ysh = 0.5j * br.b_charging
        f, t = idx[br.from_bus], idx[br.to_bus]
        y[f, f] += (ys + ysh) / br.tap**2
        y[t, t] += ys + ysh
        y[f, t] -= ys / br.tap
        y[t, f] -= ys / br.tap
    for i, b in enumerate(case.buses):
        y[i, i] += 1j * b.shunt_b
    return y


def _power_derivatives(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dS/dθ and dS/d|V| of S = V conj(Y V)."""
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])
    ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    return ds_dva, ds_dvm


def solve_power_flow(case: PowerSystemCase, tol: float = 1e-8, max_iter: int = 20) -> PowerFlowSolution:
    """Newton-Raphson power flow in polar coordinates from a flat start."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    ybus = build_admittance(case)
    kinds = [b.kind for b in case.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "pv"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
    pvpq = np.concatenate([pv, pq])
    s_spec = np.array([b.p_gen - b.p_load0 - 1j * b.q_load0 for b in case.buses])

    vm = np.ones(len(kinds))
    for i, b in enumerate(case.buses):
        if b.v_setpoint is not None:
            vm[i] = b.v_setpoint
    va = np.zeros(len(kinds))

    def mismatch(v: np.ndarray) -> np.ndarray:
        ds = v * np.conj(ybus @ v) - s_spec
        return np.concatenate([ds[pvpq].real, ds[pq].imag])

    v = vm * np.exp(1j * va)
    f = mismatch(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowError("power flow did not converge", norm, it)
        ds_dva, ds_dvm = _power_derivatives(ybus, v)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        dx = np.linalg.solve(jac, -f)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = float(np.max(np.abs(f)))
        it += 1
    # A final correction polishes the solution well below tol so the dynamic
    # initialization starts from a tightly consistent network state.
    if f.size and it:
        ds_dva, ds_dvm = _power_derivatives(ybus, v)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        dx = np.linalg.solve(jac, -f)
        va_new, vm_new = va.copy(), vm.copy()
        va_new[pvpq] += dx[: len(pvpq)]
        vm_new[pq] += dx[len(pvpq):]
        v_new = vm_new * np.exp(1j * va_new)
        f_new = mismatch(v_new)
        if np.max(np.abs(f_new)) < norm:
            v, norm = v_new, float(np.max(np.abs(f_new)))
    return PowerFlowSolution(v=v, mismatch_norm=norm, iterations=it,
                             s_injection=v * np.conj(ybus @ v))


# ---------------------------------------------------------------------------
# Dynamic initialization


def initialize_equilibrium(case: PowerSystemCase, pf: PowerFlowSolution) -> EquilibriumState:
    """Back-solve machine, exciter and governor states from a power flow.

    Standard two-axis initialization: the rotor angle is located with the
    q-axis reactance, then E'd, E'q and E_fd follow from the stator
    equations. The AVR reference and governor load reference are chosen so
    that both controllers sit at zero error.
    """
    from gentune.dynamics import Layout, saturation

    layout = Layout.for_case(case)
    idx = case.bus_index
    base = case.base_mva
    n_m = len(case.machines)
    x = np.zeros(layout.n_x)
    y = np.zeros(layout.n_y)
    v_ref = np.zeros(n_m)
    t_m0 = np.zeros(n_m)
    efd0 = np.zeros(n_m)
    p_c = np.zeros(layout.n_gov)

    # Machine injections are the bus injections plus local load.
    s_gen = pf.s_injection + np.array([b.p_load0 + 1j * b.q_load0 for b in case.buses])
    for k, m in enumerate(case.machines):
        i = idx[m.bus]
        scale = (m.mva or base) / base
        vt = pf.v[i]
        s = s_gen[i] / scale
        current = np.conj(s / vt)
        e_q = vt + 1j * m.xq * current
        delta = float(np.angle(e_q))
        rot = np.exp(-1j * (delta - math.pi / 2))
        idq = current * rot
        vdq = vt * rot
        i_d, i_q = idq.real, idq.imag
        e_d_p = (m.xq - m.xq_p) * i_q
        e_q_p = vdq.imag + m.xd_p * i_d
        efd = e_q_p + (m.xd - m.xd_p) * i_d
        avr = m.avr
        vr = (avr.k_e + saturation(avr, efd)) * efd
        if not avr.vr_min <= vr <= avr.vr_max:
            raise CaseError(f"required regulator output {vr:.4f} outside "
                            f"[{avr.vr_min}, {avr.vr_max}]", f"machine at bus {m.bus}")
        rf = avr.k_f / avr.t_f * efd
        tm = e_d_p * i_d + e_q_p * i_q + (m.xq_p - m.xd_p) * i_d * i_q
        if m.gov is None and abs(tm) > 1e-6:
            raise CaseError(f"condenser must have zero active output, got {tm * scale:.4g}",
                            f"machine at bus {m.bus}")
        if m.gov is None:
            tm = 0.0

        x[layout.delta.start + k] = delta
        x[layout.omega.start + k] = 1.0
        x[layout.eq_p.start + k] = e_q_p
        x[layout.ed_p.start + k] = e_d_p
        x[layout.efd.start + k] = efd
        x[layout.vr.start + k] = vr
        x[layout.rf.start + k] = rf
        y[layout.i_d.start + k] = i_d
        y[layout.i_q.start + k] = i_q
        v_ref[k] = abs(vt) + vr / avr.k_a
        t_m0[k] = tm
        efd0[k] = efd
        g = layout.gov_of_machine[k]
        if g >= 0:
            if not m.gov.psv_min <= tm <= m.gov.psv_max:
                raise CaseError(f"mechanical power {tm:.4f} outside valve limits",
                                f"machine at bus {m.bus}")
            x[layout.psv.start + g] = tm
            x[layout.tm.start + g] = tm
            p_c[g] = tm
    y[layout.theta] = pf.v_ang
    y[layout.v] = pf.v_mag
    return EquilibriumState(x=x, y=y, v_ref=v_ref, p_c=p_c, t_m0=t_m0, efd0=efd0,
                            v0=pf.v_mag.copy())
