"""Implicit-trapezoidal DAE integration under stochastic loads and the
IAE-based objective.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from gentune.case_model import (
    EquilibriumState,
    PowerFlowSolution,
    PowerSystemCase,
    initialize_equilibrium,
    solve_power_flow,
)
from gentune.dynamics import ControlInputs, DynamicModel, LoadSnapshot

__all__ = [
    "ObjectiveSample",
    "ObjectiveSpec",
    "SimulationConfig",
    "SimulationError",
    "SimulationTrace",
    "StochasticLoadModel",
    "TrapezoidalStepper",
    "evaluate_objective",
    "load_buses",
    "run_replicates",
    "run_simulation",
    "sample_load_multipliers",
]


class SimulationError(RuntimeError):
    """Newton failure inside the integrator."""

    def __init__(self, message: str, step: int | None = None, residual: float = math.nan,
                 iterations: int = 0, replicate: int | None = None):
        self.step = step
        self.residual = residual
        self.iterations = iterations
        self.replicate = replicate
        super().__init__(message)


@dataclass(frozen=True)
class StochasticLoadModel:
    """Relative load perturbation: ``1 + bias + lambda_i * noise``.

    ``lambda_i`` is either one value for every load or a sequence with one
    entry per load. ``kind`` is ``"iid-gaussian"`` (white noise per step) or
    ``"ou"`` (Ornstein-Uhlenbeck with time constant ``ou_tau`` and stationary
    standard deviation ``lambda_i``).
    """

    lambda_i: float | tuple[float, ...] = 0.005
    m_bound: float = 0.002
    kind: str = "iid-gaussian"
    ou_tau: float = 1.0

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda_i, dtype=float))
        if np.any(lam < 0) or self.m_bound < 0:
            raise ValueError("lambda_i and m_bound must be nonnegative")
        if self.kind not in ("iid-gaussian", "ou"):
            raise ValueError(f"unknown load noise kind {self.kind!r}")
        if self.ou_tau <= 0:
            raise ValueError("ou_tau must be positive")


@dataclass(frozen=True)
class SimulationConfig:
    t_end: float = 30.0
    h: float = 0.2
    newton_tol: float = 1e-8
    newton_max_iter: int = 25
    seed: int = 0
    load_model: StochasticLoadModel = field(default_factory=StochasticLoadModel)
    load_exponent: float = 0.0  # 0 constant power, 2 constant impedance
    jacobian: str = "analytic"  # or "fd"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.t_end < self.h:
            raise ValueError("t_end must be >= h")
        n = self.t_end / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("t_end must be an integer multiple of h")
        if self.jacobian not in ("analytic", "fd"):
            raise ValueError("jacobian must be 'analytic' or 'fd'")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.h))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SimulationTrace:
    time: np.ndarray
    bus_ids: list[int]
    machine_buses: list[int]
    v: np.ndarray  # (steps+1, buses)
    omega: np.ndarray  # (steps+1, machines)
    x: np.ndarray  # (steps+1, n_x)
    y: np.ndarray  # (steps+1, n_y)
    multipliers: np.ndarray  # (steps+1, loads); row 0 is the base load
    load_buses: list[int]
    seed: int
    params: dict[str, float]
    gov_buses: list[int] = field(default_factory=list)
    limit_flags: list[tuple[int, str]] = field(default_factory=list)

    @property
    def h(self) -> float:
        return float(self.time[1] - self.time[0])

    def to_csv(self) -> str:
        cols = (["t"] + [f"V_{b}" for b in self.bus_ids]
                + [f"omega_{b}" for b in self.machine_buses]
                + [f"load_mult_{b}" for b in self.load_buses])
        data = np.column_stack([self.time, self.v, self.omega, self.multipliers])
        lines = [",".join(cols)]
        lines += [",".join(repr(float(v)) for v in row) for row in data]
        return "\n".join(lines) + "\n"

    def sidecar(self, config: SimulationConfig) -> dict:
        return {"seed": self.seed, "params": dict(sorted(self.params.items())),
                "config_digest": config.digest(), "t_end": config.t_end, "h": config.h,
                "steps": len(self.time) - 1, "limit_flags": [list(f) for f in self.limit_flags]}


def load_buses(case: PowerSystemCase) -> list[int]:
    """Ids of buses carrying a nonzero load, in case order."""
    return [b.id for b in case.buses if b.p_load0 != 0.0 or b.q_load0 != 0.0]


def sample_load_multipliers(seed: int, model: StochasticLoadModel, n_steps: int,
                            n_loads: int, h: float = 0.2) -> np.ndarray:
    """Load multipliers for steps 1..n_steps, shape (n_steps, n_loads).

    Load ``i`` draws from its own Philox stream keyed by ``(seed, i)``: first
    the per-run bias, uniform on ``[-m_bound, m_bound]``, then one standard
    normal per step.
    """
    lam = np.broadcast_to(np.asarray(model.lambda_i, dtype=float), (n_loads,))
    out = np.empty((n_steps, n_loads))
    for i in range(n_loads):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i])))
        bias = rng.uniform(-model.m_bound, model.m_bound) if model.m_bound > 0 else 0.0
        eps = rng.standard_normal(n_steps)
        if model.kind == "ou":
            a = math.exp(-h / model.ou_tau)
            b = math.sqrt(1.0 - a * a)
            noise = np.empty(n_steps)
            state = 0.0
            for k in range(n_steps):
                state = a * state + b * eps[k]
                noise[k] = state
            eps = noise
        out[:, i] = 1.0 + bias + lam[i] * eps
    return out


class TrapezoidalStepper:
    """Simultaneous implicit-trapezoidal solve of the differential and
    algebraic equations.

    Newton iterations reuse a factorized Jacobian across steps and refresh
    it only when convergence slows, which keeps the typical step at two or
    three residual evaluations.
    """

    def __init__(self, model: DynamicModel, u: ControlInputs, h: float,
                 tol: float = 1e-8, max_iter: int = 25, jacobian: str = "analytic"):
        self.model = model
        self.u = u
        self.h = h
        self.tol = tol
        self.max_iter = max_iter
        self.jacobian = jacobian
        self._lu = None
        self.n_x = model.layout.n_x
        self.jacobian_updates = 0

    def _factorize(self, x: np.ndarray, y: np.ndarray, loads: LoadSnapshot) -> None:
        jac_fn = self.model.jacobians if self.jacobian == "analytic" else self.model.jacobians_fd
        fx, fy, gx, gy = jac_fn(x, y, self.u, loads)
        hh = 0.5 * self.h
        jac = np.block([[np.eye(self.n_x) - hh * fx, -hh * fy], [gx, gy]])
        self._lu = scipy.linalg.lu_factor(jac, check_finite=False)
        self.jacobian_updates += 1

    def residual(self, z, x_k, f_k, loads):
        x, y = z[: self.n_x], z[self.n_x:]
        r_x = x - x_k - 0.5 * self.h * (f_k + self.model.f(x, y, self.u))
        return np.concatenate([r_x, self.model.g(x, y, loads)])

    def step(self, x_k: np.ndarray, y_k: np.ndarray, loads_next: LoadSnapshot,
             f_k: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, int]:
        """Advance one step. Returns (x_{k+1}, y_{k+1}, iterations)."""
        if f_k is None:
            f_k = self.model.f(x_k, y_k, self.u)
        z = np.concatenate([x_k, y_k])
        if self._lu is None:
            self._factorize(x_k, y_k, loads_next)
        r = self.residual(z, x_k, f_k, loads_next)
        norm = float(np.max(np.abs(r)))
        it = 0
        fresh = False
        while norm > self.tol:
            if it >= self.max_iter or not np.isfinite(norm):
                raise SimulationError(f"Newton did not converge: residual {norm:.3e} "
                                      f"after {it} iterations", residual=norm, iterations=it)
            z = z - scipy.linalg.lu_solve(self._lu, r, check_finite=False)
            r_new = self.residual(z, x_k, f_k, loads_next)
            new_norm = float(np.max(np.abs(r_new)))
            it += 1
            if new_norm > 0.25 * norm and new_norm > self.tol and not fresh:
                self._factorize(z[: self.n_x], z[self.n_x:], loads_next)
                fresh = True
            elif new_norm <= 0.25 * norm:
                fresh = False
            r, norm = r_new, new_norm
        return z[: self.n_x], z[self.n_x:], it


def _equilibrium(case: PowerSystemCase, pf: PowerFlowSolution | None) -> EquilibriumState:
    if pf is None:
        pf = solve_power_flow(case)
    return initialize_equilibrium(case, pf)


def run_simulation(case: PowerSystemCase, params: Mapping[str, float] | None = None,
                   config: SimulationConfig | None = None, *,
                   equilibrium: EquilibriumState | None = None,
                   multipliers: np.ndarray | None = None,
                   pf: PowerFlowSolution | None = None) -> SimulationTrace:
    """Simulate ``[0, t_end]`` from the equilibrium of ``case`` with ``params``.

    ``multipliers`` (shape ``(n_steps, n_loads)``) overrides the stochastic
    load draw, e.g. for deterministic load steps. Tuning parameters change
    the AVR reference but not the power flow, so ``pf`` may be shared across
    runs of the same case.
    """
    config = config or SimulationConfig()
    params = dict(params or {})
    tuned = case.with_params(params) if params else case
    eq = equilibrium or _equilibrium(tuned, pf)
    model = DynamicModel(tuned, v0=eq.v0, load_exponent=config.load_exponent)
    u = ControlInputs(eq.v_ref, eq.p_c, eq.t_m0)
    n = config.n_steps
    lbuses = load_buses(case)
    idx = case.bus_index
    lidx = np.array([idx[b] for b in lbuses], dtype=int)
    if multipliers is None:
        multipliers = sample_load_multipliers(config.seed, config.load_model, n,
                                              len(lbuses), config.h)
    elif multipliers.shape != (n, len(lbuses)):
        raise ValueError(f"multipliers must have shape {(n, len(lbuses))}")
    base = LoadSnapshot.base(case)

    stepper = TrapezoidalStepper(model, u, config.h, config.newton_tol,
                                 config.newton_max_iter, config.jacobian)
    lay = model.layout
    xs = np.empty((n + 1, lay.n_x))
    ys = np.empty((n + 1, lay.n_y))
    xs[0], ys[0] = eq.x, eq.y
    flags: list[tuple[int, str]] = []
    x, y = eq.x, eq.y
    f_k = model.f(x, y, u)
    for k in range(n):
        mult = np.ones(len(case.buses))
        mult[lidx] = multipliers[k]
        try:
            x, y, _ = stepper.step(x, y, base.scaled(mult), f_k)
        except SimulationError as exc:
            raise SimulationError(f"step {k + 1}: {exc}", step=k + 1, residual=exc.residual,
                                  iterations=exc.iterations) from None
        x, active = model.clamp(x)
        flags += [(k + 1, a) for a in active]
        f_k = model.f(x, y, u)
        xs[k + 1], ys[k + 1] = x, y
    time = np.arange(n + 1) * config.h
    return SimulationTrace(
        time=time,
        bus_ids=[b.id for b in case.buses],
        machine_buses=[m.bus for m in case.machines],
        v=ys[:, lay.v].copy(),
        omega=xs[:, lay.omega].copy(),
        x=xs,
        y=ys,
        multipliers=np.vstack([np.ones(len(lbuses)), multipliers]),
        load_buses=lbuses,
        seed=config.seed,
        params={k: float(v) for k, v in tuned.params().items()},
        gov_buses=[case.machines[k].bus for k in lay.gov_machines],
        limit_flags=flags,
    )


@dataclass(frozen=True)
class ObjectiveSpec:
    """Weights per controller channel.

    Channel names are ``V_<bus>`` for AVRs (terminal-voltage deviation from
    its initial value) and ``omega_<bus>`` for governors (per-unit speed
    deviation). ``weights=None`` means uniform over every channel.
    """

    weights: Mapping[str, float] | None = None

    def channels(self, trace: SimulationTrace) -> list[str]:
        return ([f"V_{b}" for b in trace.machine_buses]
                + [f"omega_{b}" for b in trace.gov_buses])

    def resolve(self, trace: SimulationTrace) -> dict[str, float]:
        names = self.channels(trace)
        if self.weights is None:
            return {c: 1.0 / len(names) for c in names}
        unknown = set(self.weights) - set(names)
        if unknown:
            raise ValueError(f"unknown objective channels {sorted(unknown)}")
        w = {c: float(self.weights.get(c, 0.0)) for c in names}
        if any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1.0) > 1e-12:
            raise ValueError("objective weights must be nonnegative and sum to 1")
        return w


@dataclass(frozen=True)
class ObjectiveSample:
    y: float
    iae: dict[str, float]
    seed: int
    params: dict[str, float]


def channel_errors(trace: SimulationTrace) -> dict[str, np.ndarray]:
    """Absolute controller error signal per channel over the time grid."""
    out = {}
    col = {b: i for i, b in enumerate(trace.bus_ids)}
    for b in trace.machine_buses:
        v = trace.v[:, col[b]]
        out[f"V_{b}"] = np.abs(v - v[0])
    mcol = {b: i for i, b in enumerate(trace.machine_buses)}
    for b in trace.gov_buses:
        out[f"omega_{b}"] = np.abs(trace.omega[:, mcol[b]] - 1.0)
    return out


def evaluate_objective(trace: SimulationTrace, spec: ObjectiveSpec | None = None) -> ObjectiveSample:
    """Weighted average of per-channel IAE (rectangle rule, steps k >= 1)."""
    spec = spec or ObjectiveSpec()
    weights = spec.resolve(trace)
    errors = channel_errors(trace)
    h = trace.h
    iae = {c: float(np.sum(errors[c][1:]) * h) for c in weights}
    y = float(sum(weights[c] * iae[c] for c in weights))
    return ObjectiveSample(y=y, iae=iae, seed=trace.seed, params=dict(trace.params))


def _replicate(args) -> ObjectiveSample:
    case, params, config, spec, r, pf = args
    cfg = replace(config, seed=config.seed + r)
    try:
        trace = run_simulation(case, params, cfg, pf=pf)
    except SimulationError as exc:
        raise SimulationError(f"replicate {r}: {exc}", step=exc.step, residual=exc.residual,
                              iterations=exc.iterations, replicate=r) from None
    return evaluate_objective(trace, spec)


def run_replicates(case: PowerSystemCase, params: Mapping[str, float] | None, n: int,
                   config: SimulationConfig | None = None,
                   spec: ObjectiveSpec | None = None, threads: int = 1) -> list[ObjectiveSample]:
    """``n`` independent objective samples; replicate ``r`` uses ``seed + r``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or SimulationConfig()
    pf = solve_power_flow(case)
    jobs = [(case, params, config, spec, r, pf) for r in range(n)]
    return map_jobs(_replicate, jobs, threads)


def map_jobs(fn, jobs: Sequence, threads: int = 1) -> list:
    """Ordered map, optionally on a thread pool. Results never depend on
    scheduling because every job owns its inputs and RNG stream."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))
