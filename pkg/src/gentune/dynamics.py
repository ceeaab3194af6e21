"""Differential-algebraic model of the machines, controllers and network.

Every machine is a two-axis (fourth-order) synchronous machine with stator
resistance neglected, driven by an IEEE Type I exciter. Generators also carry
a two-block droop governor (servo valve + turbine charging time). Condensers
have no governor; their mechanical torque is a constant.

Differential states per machine, in machine base::

    d(delta)/dt  = omega_s * (omega - 1)
    2H d(omega)/dt = T_M - T_e - D (omega - 1)
    T'd0 dE'q/dt = -E'q - (X_d - X'd) I_d + E_fd
    T'q0 dE'd/dt = -E'd + (X_q - X'q) I_q
    T_E dE_fd/dt = -(K_E + S_E(E_fd)) E_fd + V_R
    T_A dV_R/dt  = -V_R + K_A R_f - K_A K_F / T_F E_fd + K_A (V_ref - V)
    T_F dR_f/dt  = -R_f + K_F / T_F E_fd
    T_SV dP_SV/dt = -P_SV + P_C - (omega - 1) / R
    T_CH dT_M/dt  = -T_M + P_SV

with ``T_e = E'd I_d + E'q I_q + (X'q - X'd) I_d I_q``. The algebraic part is
the two stator equations per machine and the active/reactive power balance
at every bus. See ``docs/model-reference.md`` for the derivation notes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from gentune.case_model import AvrParams, PowerSystemCase, _power_derivatives, build_admittance

__all__ = [
    "ControlInputs",
    "DynamicModel",
    "Layout",
    "LoadSnapshot",
    "SystemState",
    "algebraic_residual",
    "apply_limits",
    "differential_residual",
    "saturation",
]


def saturation(avr: AvrParams, efd):
    """Exciter saturation function S_E(E_fd) (quadratic above its knee)."""
    a, b = avr.saturation_coefficients()
    efd = np.asarray(efd, dtype=float)
    out = np.where(efd > a, b * (efd - a) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Layout:
    """Index map of the stacked state: differential block, then algebraic block.

    Differential block: delta, omega, E'q, E'd, E_fd, V_R, R_f for every
    machine, then P_SV and T_M for every governor. Algebraic block: bus
    angles, bus magnitudes, I_d and I_q per machine.
    """

    n_machines: int
    n_buses: int
    gov_machines: tuple[int, ...]

    @classmethod
    def for_case(cls, case: PowerSystemCase) -> Layout:
        gov = tuple(k for k, m in enumerate(case.machines) if m.gov is not None)
        return cls(len(case.machines), len(case.buses), gov)

    @property
    def n_gov(self) -> int:
        return len(self.gov_machines)

    @cached_property
    def gov_of_machine(self) -> np.ndarray:
        out = -np.ones(self.n_machines, dtype=int)
        for g, k in enumerate(self.gov_machines):
            out[k] = g
        return out

    def _block(self, i: int) -> slice:
        m = self.n_machines
        return slice(i * m, (i + 1) * m)

    delta = property(lambda self: self._block(0))
    omega = property(lambda self: self._block(1))
    eq_p = property(lambda self: self._block(2))
    ed_p = property(lambda self: self._block(3))
    efd = property(lambda self: self._block(4))
    vr = property(lambda self: self._block(5))
    rf = property(lambda self: self._block(6))

    @property
    def psv(self) -> slice:
        start = 7 * self.n_machines
        return slice(start, start + self.n_gov)

    @property
    def tm(self) -> slice:
        start = 7 * self.n_machines + self.n_gov
        return slice(start, start + self.n_gov)

    @property
    def n_x(self) -> int:
        return 7 * self.n_machines + 2 * self.n_gov

    # algebraic block (indices into y)
    theta = property(lambda self: slice(0, self.n_buses))
    v = property(lambda self: slice(self.n_buses, 2 * self.n_buses))

    @property
    def i_d(self) -> slice:
        return slice(2 * self.n_buses, 2 * self.n_buses + self.n_machines)

    @property
    def i_q(self) -> slice:
        s = 2 * self.n_buses + self.n_machines
        return slice(s, s + self.n_machines)

    @property
    def n_y(self) -> int:
        return 2 * self.n_buses + 2 * self.n_machines

    def names(self) -> list[str]:
        """Human-readable label of every entry of the stacked vector."""
        m, g = self.n_machines, self.gov_machines
        out = []
        for block in ("delta", "omega", "eq_p", "ed_p", "efd", "vr", "rf"):
            out += [f"{block}[{k}]" for k in range(m)]
        out += [f"psv[{k}]" for k in g] + [f"tm[{k}]" for k in g]
        out += [f"theta[{i}]" for i in range(self.n_buses)]
        out += [f"v[{i}]" for i in range(self.n_buses)]
        out += [f"i_d[{k}]" for k in range(m)] + [f"i_q[{k}]" for k in range(m)]
        return out


_DIFF_FIELDS = ("delta", "omega", "eq_p", "ed_p", "efd", "vr", "rf", "psv", "tm")
_ALG_FIELDS = ("theta", "v", "i_d", "i_q")


@dataclass(frozen=True)
class SystemState:
    """Named view of the stacked DAE state."""

    layout: Layout
    delta: np.ndarray
    omega: np.ndarray
    eq_p: np.ndarray
    ed_p: np.ndarray
    efd: np.ndarray
    vr: np.ndarray
    rf: np.ndarray
    psv: np.ndarray
    tm: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray

    @classmethod
    def unpack(cls, layout: Layout, x: np.ndarray, y: np.ndarray) -> SystemState:
        if x.shape != (layout.n_x,) or y.shape != (layout.n_y,):
            raise ValueError(f"state dimension mismatch: got {x.shape}/{y.shape}, "
                             f"expected ({layout.n_x},)/({layout.n_y},)")
        parts = {f: x[getattr(layout, f)].copy() for f in _DIFF_FIELDS}
        parts.update({f: y[getattr(layout, f)].copy() for f in _ALG_FIELDS})
        return cls(layout=layout, **parts)

    @classmethod
    def from_vector(cls, layout: Layout, z: np.ndarray) -> SystemState:
        return cls.unpack(layout, z[: layout.n_x], z[layout.n_x:])

    def pack(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.empty(self.layout.n_x)
        y = np.empty(self.layout.n_y)
        for f in _DIFF_FIELDS:
            x[getattr(self.layout, f)] = getattr(self, f)
        for f in _ALG_FIELDS:
            y[getattr(self.layout, f)] = getattr(self, f)
        return x, y

    def to_vector(self) -> np.ndarray:
        return np.concatenate(self.pack())


@dataclass(frozen=True)
class LoadSnapshot:
    """Effective per-bus load (P, Q) in system p.u., at nominal voltage."""

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def base(cls, case: PowerSystemCase) -> LoadSnapshot:
        return cls(np.array([b.p_load0 for b in case.buses]),
                   np.array([b.q_load0 for b in case.buses]))

    def scaled(self, multipliers: np.ndarray) -> LoadSnapshot:
        return LoadSnapshot(self.p * multipliers, self.q * multipliers)


@dataclass(frozen=True)
class ControlInputs:
    v_ref: np.ndarray  # per machine
    p_c: np.ndarray  # per governor
    t_m: np.ndarray  # per machine; used only for machines without governor


class DynamicModel:
    """Vectorized residuals and Jacobians of the DAE for one case.

    ``load_exponent`` selects the voltage dependence of loads relative to
    the initial voltage ``v0``: 0 is constant power, 2 constant impedance.
    """

    def __init__(self, case: PowerSystemCase, v0: np.ndarray | None = None,
                 load_exponent: float = 0.0):
        self.case = case
        self.layout = lay = Layout.for_case(case)
        self.ybus = build_admittance(case)
        ms = case.machines
        idx = case.bus_index
        self.bus_of = np.array([idx[m.bus] for m in ms], dtype=int)
        self.scale = np.array([(m.mva or case.base_mva) / case.base_mva for m in ms])
        self.omega_s = case.omega_s
        arr = lambda f: np.array([f(m) for m in ms], dtype=float)  # noqa: E731
        self.h = arr(lambda m: m.h)
        self.d = arr(lambda m: m.d)
        self.xd, self.xq = arr(lambda m: m.xd), arr(lambda m: m.xq)
        self.xd_p, self.xq_p = arr(lambda m: m.xd_p), arr(lambda m: m.xq_p)
        self.td0, self.tq0 = arr(lambda m: m.td0_p), arr(lambda m: m.tq0_p)
        self.ka, self.ta = arr(lambda m: m.avr.k_a), arr(lambda m: m.avr.t_a)
        self.ke, self.te = arr(lambda m: m.avr.k_e), arr(lambda m: m.avr.t_e)
        self.kf, self.tf = arr(lambda m: m.avr.k_f), arr(lambda m: m.avr.t_f)
        self.vr_min, self.vr_max = arr(lambda m: m.avr.vr_min), arr(lambda m: m.avr.vr_max)
        sat = [m.avr.saturation_coefficients() for m in ms]
        self.sat_a = np.array([s[0] for s in sat])
        self.sat_b = np.array([s[1] for s in sat])
        gm = list(lay.gov_machines)
        self.gov_idx = np.array(gm, dtype=int)
        gov = [ms[k].gov for k in gm]
        self.r = np.array([g.r_droop for g in gov])
        self.tsv = np.array([g.t_sv for g in gov])
        self.tch = np.array([g.t_ch for g in gov])
        self.psv_min = np.array([g.psv_min for g in gov])
        self.psv_max = np.array([g.psv_max for g in gov])
        self.v0 = np.ones(lay.n_buses) if v0 is None else np.asarray(v0, dtype=float)
        self.load_exponent = float(load_exponent)
        # machine -> bus incidence for injections
        self.cg = np.zeros((lay.n_buses, lay.n_machines))
        self.cg[self.bus_of, np.arange(lay.n_machines)] = self.scale

    # -- helpers ----------------------------------------------------------

    def _sat(self, efd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        above = efd > self.sat_a
        se = np.where(above, self.sat_b * (efd - self.sat_a) ** 2, 0.0)
        dse = np.where(above, 2.0 * self.sat_b * (efd - self.sat_a), 0.0)
        return se, dse

    def mechanical_torque(self, x: np.ndarray, u: ControlInputs) -> np.ndarray:
        tm = np.array(u.t_m, dtype=float, copy=True)
        tm[self.gov_idx] = x[self.layout.tm]
        return tm

    def electrical_torque(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        lay = self.layout
        i_d, i_q = y[lay.i_d], y[lay.i_q]
        return (x[lay.ed_p] * i_d + x[lay.eq_p] * i_q
                + (self.xq_p - self.xd_p) * i_d * i_q)

    def load_power(self, y: np.ndarray, loads: LoadSnapshot) -> tuple[np.ndarray, np.ndarray]:
        if self.load_exponent == 0.0:
            return loads.p, loads.q
        ratio = (y[self.layout.v] / self.v0) ** self.load_exponent
        return loads.p * ratio, loads.q * ratio

    # -- residuals --------------------------------------------------------

    def f(self, x: np.ndarray, y: np.ndarray, u: ControlInputs) -> np.ndarray:
        lay = self.layout
        omega, eq, ed = x[lay.omega], x[lay.eq_p], x[lay.ed_p]
        efd, vr, rf = x[lay.efd], x[lay.vr], x[lay.rf]
        i_d, i_q = y[lay.i_d], y[lay.i_q]
        vt = y[lay.v][self.bus_of]
        se, _ = self._sat(efd)
        dx = np.empty_like(x)
        dx[lay.delta] = self.omega_s * (omega - 1.0)
        dx[lay.omega] = (self.mechanical_torque(x, u) - self.electrical_torque(x, y)
                         - self.d * (omega - 1.0)) / (2.0 * self.h)
        dx[lay.eq_p] = (-eq - (self.xd - self.xd_p) * i_d + efd) / self.td0
        dx[lay.ed_p] = (-ed + (self.xq - self.xq_p) * i_q) / self.tq0
        dx[lay.efd] = (-(self.ke + se) * efd + vr) / self.te
        dx[lay.vr] = (-vr + self.ka * rf - self.ka * self.kf / self.tf * efd
                      + self.ka * (u.v_ref - vt)) / self.ta
        dx[lay.rf] = (-rf + self.kf / self.tf * efd) / self.tf
        if lay.n_gov:
            w = omega[self.gov_idx]
            psv, tm = x[lay.psv], x[lay.tm]
            dx[lay.psv] = (-psv + u.p_c - (w - 1.0) / self.r) / self.tsv
            dx[lay.tm] = (-tm + psv) / self.tch
        return dx

    def machine_injection(self, x: np.ndarray, y: np.ndarray):
        """Per-machine (P, Q) delivered to the network, system base."""
        lay = self.layout
        phi = x[lay.delta] - y[lay.theta][self.bus_of]
        vt = y[lay.v][self.bus_of]
        i_d, i_q = y[lay.i_d], y[lay.i_q]
        s, c = np.sin(phi), np.cos(phi)
        p = self.scale * vt * (i_d * s + i_q * c)
        q = self.scale * vt * (i_d * c - i_q * s)
        return p, q, phi, s, c

    def g(self, x: np.ndarray, y: np.ndarray, loads: LoadSnapshot) -> np.ndarray:
        lay = self.layout
        m, n = lay.n_machines, lay.n_buses
        vm, va = y[lay.v], y[lay.theta]
        vt = vm[self.bus_of]
        p_m, q_m, _, s, c = self.machine_injection(x, y)
        v = vm * np.exp(1j * va)
        s_net = v * np.conj(self.ybus @ v)
        p_l, q_l = self.load_power(y, loads)
        out = np.empty(lay.n_y)
        out[:m] = x[lay.ed_p] - vt * s + self.xq_p * y[lay.i_q]
        out[m:2 * m] = x[lay.eq_p] - vt * c - self.xd_p * y[lay.i_d]
        out[2 * m:2 * m + n] = np.bincount(self.bus_of, p_m, n) - p_l - s_net.real
        out[2 * m + n:] = np.bincount(self.bus_of, q_m, n) - q_l - s_net.imag
        return out

    # -- Jacobians ----------------------------------------------------------

    def jacobians(self, x: np.ndarray, y: np.ndarray, u: ControlInputs, loads: LoadSnapshot):
        """Analytic (Fx, Fy, Gx, Gy)."""
        lay = self.layout
        m, n, nx, ny = lay.n_machines, lay.n_buses, lay.n_x, lay.n_y
        k = np.arange(m)
        sl = lambda s: s.start + k  # noqa: E731
        i_d, i_q = y[lay.i_d], y[lay.i_q]
        eq, ed, efd = x[lay.eq_p], x[lay.ed_p], x[lay.efd]
        se, dse = self._sat(efd)

        fx = np.zeros((nx, nx))
        fy = np.zeros((nx, ny))
        two_h = 2.0 * self.h
        fx[sl(lay.delta), sl(lay.omega)] = self.omega_s
        fx[sl(lay.omega), sl(lay.omega)] = -self.d / two_h
        fx[sl(lay.omega), sl(lay.eq_p)] = -i_q / two_h
        fx[sl(lay.omega), sl(lay.ed_p)] = -i_d / two_h
        fx[sl(lay.eq_p), sl(lay.eq_p)] = -1.0 / self.td0
        fx[sl(lay.eq_p), sl(lay.efd)] = 1.0 / self.td0
        fx[sl(lay.ed_p), sl(lay.ed_p)] = -1.0 / self.tq0
        fx[sl(lay.efd), sl(lay.efd)] = -(self.ke + se + dse * efd) / self.te
        fx[sl(lay.efd), sl(lay.vr)] = 1.0 / self.te
        fx[sl(lay.vr), sl(lay.vr)] = -1.0 / self.ta
        fx[sl(lay.vr), sl(lay.rf)] = self.ka / self.ta
        fx[sl(lay.vr), sl(lay.efd)] = -self.ka * self.kf / (self.tf * self.ta)
        fx[sl(lay.rf), sl(lay.rf)] = -1.0 / self.tf
        fx[sl(lay.rf), sl(lay.efd)] = self.kf / self.tf**2
        if lay.n_gov:
            g = np.arange(lay.n_gov)
            gi = self.gov_idx
            psv_i, tm_i = lay.psv.start + g, lay.tm.start + g
            fx[lay.omega.start + gi, tm_i] = 1.0 / two_h[gi]
            fx[psv_i, psv_i] = -1.0 / self.tsv
            fx[psv_i, lay.omega.start + gi] = -1.0 / (self.r * self.tsv)
            fx[tm_i, tm_i] = -1.0 / self.tch
            fx[tm_i, psv_i] = 1.0 / self.tch
        dxp = self.xq_p - self.xd_p
        fy[sl(lay.omega), sl(lay.i_d)] = -(ed + dxp * i_q) / two_h
        fy[sl(lay.omega), sl(lay.i_q)] = -(eq + dxp * i_d) / two_h
        fy[sl(lay.eq_p), sl(lay.i_d)] = -(self.xd - self.xd_p) / self.td0
        fy[sl(lay.ed_p), sl(lay.i_q)] = (self.xq - self.xq_p) / self.tq0
        fy[sl(lay.vr), lay.v.start + self.bus_of] = -self.ka / self.ta

        p_m, q_m, _, s, c = self.machine_injection(x, y)
        vm, va = y[lay.v], y[lay.theta]
        vt = vm[self.bus_of]
        b = self.bus_of
        gx = np.zeros((ny, nx))
        gy = np.zeros((ny, ny))
        r1, r2 = k, m + k
        rp, rq = 2 * m, 2 * m + n
        # stator equations
        gx[r1, sl(lay.delta)] = -vt * c
        gx[r1, sl(lay.ed_p)] = 1.0
        gx[r2, sl(lay.delta)] = vt * s
        gx[r2, sl(lay.eq_p)] = 1.0
        gy[r1, lay.theta.start + b] = vt * c
        gy[r1, lay.v.start + b] = -s
        gy[r1, sl(lay.i_q)] = self.xq_p
        gy[r2, lay.theta.start + b] = -vt * s
        gy[r2, lay.v.start + b] = -c
        gy[r2, sl(lay.i_d)] = -self.xd_p
        # machine injections into bus balances
        gx[rp + b, sl(lay.delta)] = q_m
        gx[rq + b, sl(lay.delta)] = -p_m
        np.add.at(gy, (rp + b, lay.theta.start + b), -q_m)
        np.add.at(gy, (rq + b, lay.theta.start + b), p_m)
        np.add.at(gy, (rp + b, lay.v.start + b), p_m / vt)
        np.add.at(gy, (rq + b, lay.v.start + b), q_m / vt)
        gy[rp + b, sl(lay.i_d)] = self.scale * vt * s
        gy[rp + b, sl(lay.i_q)] = self.scale * vt * c
        gy[rq + b, sl(lay.i_d)] = self.scale * vt * c
        gy[rq + b, sl(lay.i_q)] = -self.scale * vt * s
        # loads
        if self.load_exponent != 0.0:
            p_l, q_l = self.load_power(y, loads)
            bus = np.arange(n)
            gy[rp + bus, lay.v.start + bus] -= self.load_exponent * p_l / vm
            gy[rq + bus, lay.v.start + bus] -= self.load_exponent * q_l / vm
        # network
        v = vm * np.exp(1j * va)
        ds_dva, ds_dvm = _power_derivatives(self.ybus, v)
        gy[rp:rp + n, lay.theta] -= ds_dva.real
        gy[rp:rp + n, lay.v] -= ds_dvm.real
        gy[rq:rq + n, lay.theta] -= ds_dva.imag
        gy[rq:rq + n, lay.v] -= ds_dvm.imag
        return fx, fy, gx, gy

    def jacobians_fd(self, x: np.ndarray, y: np.ndarray, u: ControlInputs,
                     loads: LoadSnapshot, eps: float = 1e-7):
        """Central finite-difference (Fx, Fy, Gx, Gy); fallback and test oracle."""
        nx, ny = len(x), len(y)
        fx, fy = np.zeros((nx, nx)), np.zeros((nx, ny))
        gx, gy = np.zeros((ny, nx)), np.zeros((ny, ny))
        for j in range(nx):
            e = np.zeros(nx)
            e[j] = eps * max(1.0, abs(x[j]))
            fx[:, j] = (self.f(x + e, y, u) - self.f(x - e, y, u)) / (2 * e[j])
            gx[:, j] = (self.g(x + e, y, loads) - self.g(x - e, y, loads)) / (2 * e[j])
        for j in range(ny):
            e = np.zeros(ny)
            e[j] = eps * max(1.0, abs(y[j]))
            fy[:, j] = (self.f(x, y + e, u) - self.f(x, y - e, u)) / (2 * e[j])
            gy[:, j] = (self.g(x, y + e, loads) - self.g(x, y - e, loads)) / (2 * e[j])
        return fx, fy, gx, gy

    # -- limits -----------------------------------------------------------

    def clamp(self, x: np.ndarray) -> tuple[np.ndarray, list[str]]:
        lay = self.layout
        out = x.copy()
        flags = []
        vr = out[lay.vr]
        for k in np.flatnonzero(vr > self.vr_max):
            flags.append(f"vr_max@bus{self.case.machines[k].bus}")
        for k in np.flatnonzero(vr < self.vr_min):
            flags.append(f"vr_min@bus{self.case.machines[k].bus}")
        out[lay.vr] = np.clip(vr, self.vr_min, self.vr_max)
        if lay.n_gov:
            psv = out[lay.psv]
            for g in np.flatnonzero(psv > self.psv_max):
                flags.append(f"psv_max@bus{self.case.machines[self.gov_idx[g]].bus}")
            for g in np.flatnonzero(psv < self.psv_min):
                flags.append(f"psv_min@bus{self.case.machines[self.gov_idx[g]].bus}")
            out[lay.psv] = np.clip(psv, self.psv_min, self.psv_max)
        return out, flags


def _check_state(state: SystemState, case: PowerSystemCase) -> None:
    if state.layout != Layout.for_case(case):
        raise ValueError("state dimensions do not match the case")


def differential_residual(state: SystemState, inputs: ControlInputs,
                          case: PowerSystemCase) -> np.ndarray:
    """dx/dt for every differential state, in layout order."""
    _check_state(state, case)
    x, y = state.pack()
    return DynamicModel(case).f(x, y, inputs)


def algebraic_residual(state: SystemState, loads: LoadSnapshot, ybus: np.ndarray,
                       case: PowerSystemCase, v0: np.ndarray | None = None,
                       load_exponent: float = 0.0) -> np.ndarray:
    """Stator equations per machine, then P and Q balance per bus."""
    _check_state(state, case)
    if ybus.shape != (len(case.buses),) * 2:
        raise ValueError("admittance matrix dimension mismatch")
    model = DynamicModel(case, v0=v0, load_exponent=load_exponent)
    model.ybus = ybus
    x, y = state.pack()
    return model.g(x, y, loads)


def apply_limits(state: SystemState, case: PowerSystemCase) -> tuple[SystemState, list[str]]:
    """Clamp regulator outputs and valve positions into their bounds."""
    _check_state(state, case)
    x, y = state.pack()
    x_new, flags = DynamicModel(case).clamp(x)
    return SystemState.unpack(state.layout, x_new, y), flags
