"""Pipeline configuration: loading, validation and defaults."""

from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from gentune.case_model import PowerSystemCase, load_bundled_case, parse_case
from gentune.doe import Factor
from gentune.simulator import ObjectiveSpec, SimulationConfig, StochasticLoadModel

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["ConfigError", "PipelineConfig", "StubObjective", "load_case", "load_config",
           "default_config", "bundled_config_path"]

K_A_RANGE = (25.0, 500.0)
DROOP_RANGE = (0.02, 0.1)

_TOP_KEYS = {"case", "seed", "threads", "out_dir", "simulation", "objective", "factors",
             "normal", "screening", "anova", "rsm", "optimize", "validate", "stub"}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (maps to exit code 1)."""


_STUB_TOKEN = re.compile(r"([A-Z])(?:\^(\d+))?")


@dataclass(frozen=True)
class StubObjective:
    """Cheap analytic stand-in for the simulator.

    ``y = intercept + sum(coef * prod(coded_factor ** power)) + noise * N(0, 1)``
    with terms written as e.g. ``"D"``, ``"DE"`` or ``"D^2E"`` over the
    coded levels of the factor table. The noise draw is seeded by the run
    seed, so the stub obeys the same seeding contract as simulations.
    """

    intercept: float = 0.0
    terms: Mapping[str, float] = field(default_factory=dict)
    noise: float = 0.0

    def parsed_terms(self) -> list[tuple[dict[str, int], float]]:
        out = []
        for key, coef in self.terms.items():
            pos, powers = 0, {}
            for m in _STUB_TOKEN.finditer(key):
                if m.start() != pos:
                    break
                powers[m.group(1)] = powers.get(m.group(1), 0) + int(m.group(2) or 1)
                pos = m.end()
            if pos != len(key) or not powers:
                raise ConfigError(f"stub term {key!r} is not a product of factor letters")
            out.append((powers, float(coef)))
        return out


@dataclass(frozen=True)
class PipelineConfig:
    case: str = "ieee14"
    seed: int = 0
    threads: int = 1
    out_dir: str = "gentune-out"
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    factors: tuple[Factor, ...] = ()
    normal: Mapping[str, float] = field(default_factory=dict)
    screening: Mapping[str, Any] = field(default_factory=dict)
    anova: Mapping[str, Any] = field(default_factory=dict)
    rsm: Mapping[str, Any] = field(default_factory=dict)
    optimize: Mapping[str, Any] = field(default_factory=dict)
    validate: Mapping[str, Any] = field(default_factory=dict)
    stub: StubObjective | None = None
    base_dir: str = "."

    def factor(self, letter: str) -> Factor:
        for f in self.factors:
            if f.letter == letter:
                return f
        raise ConfigError(f"unknown factor letter {letter!r}")

    def digest(self) -> str:
        """SHA256 of every setting that can change an artifact (not threads
        or the output directory)."""
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def canonical(self) -> dict:
        sim = self.simulation
        lm = sim.load_model
        return {
            "case": self.case,
            "seed": self.seed,
            "simulation": {"t_end": sim.t_end, "h": sim.h, "newton_tol": sim.newton_tol,
                           "newton_max_iter": sim.newton_max_iter,
                           "load_exponent": sim.load_exponent, "jacobian": sim.jacobian,
                           "load_model": {"kind": lm.kind, "lambda_i": lm.lambda_i,
                                          "m_bound": lm.m_bound, "ou_tau": lm.ou_tau}},
            "objective": None if self.objective.weights is None else dict(self.objective.weights),
            "factors": [[f.letter, f.name, f.low, f.high] for f in self.factors],
            "normal": dict(sorted(self.normal.items())),
            "screening": dict(self.screening),
            "anova": dict(self.anova),
            "rsm": dict(self.rsm),
            "optimize": dict(self.optimize),
            "validate": dict(self.validate),
            "stub": None if self.stub is None else {"intercept": self.stub.intercept,
                                                    "terms": dict(self.stub.terms),
                                                    "noise": self.stub.noise},
        }


def bundled_config_path() -> Path:
    return Path(str(resources.files("gentune.data") / "ieee14_pipeline.toml"))


def load_case(ref: str, base_dir: str | Path = ".") -> PowerSystemCase:
    """Bundled case name (e.g. ``"ieee14"``) or path to a case JSON file."""
    path = Path(ref)
    if not path.is_absolute():
        path = Path(base_dir) / path
    if path.suffix == ".json" or path.exists():
        if not path.is_file():
            raise ConfigError(f"case file not found: {path}")
        return parse_case(path.read_text())
    try:
        return load_bundled_case(ref)
    except (FileNotFoundError, ModuleNotFoundError):
        raise ConfigError(f"case not found: {ref!r}") from None


def read_mapping(path: str | Path) -> dict:
    """Read a TOML or JSON mapping, chosen by file extension."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        if path.suffix.lower() == ".json":
            return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}: config must be .toml or .json")


def default_factors(case: PowerSystemCase) -> tuple[Factor, ...]:
    out = []
    for letter, name in case.tunable_map.items():
        lo, hi = K_A_RANGE if name.startswith("K_A") else DROOP_RANGE
        out.append(Factor(letter, name, lo, hi))
    return tuple(out)


def _strict(section: str, data: Mapping, allowed: set[str]) -> None:
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}")


def _simulation(data: Mapping) -> SimulationConfig:
    _strict("simulation", data, {"t_end", "h", "newton_tol", "newton_max_iter",
                                 "load_exponent", "jacobian", "load_model"})
    lm = dict(data.get("load_model", {}))
    _strict("simulation.load_model", lm, {"kind", "lambda_i", "m_bound", "ou_tau"})
    if isinstance(lm.get("lambda_i"), list):
        lm["lambda_i"] = tuple(lm["lambda_i"])
    kw = {k: v for k, v in data.items() if k != "load_model"}
    try:
        return SimulationConfig(load_model=StochasticLoadModel(**lm), **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[simulation]: {exc}") from None


def config_from_mapping(data: Mapping, base_dir: str | Path = ".") -> PipelineConfig:
    _strict("top level", data, _TOP_KEYS)
    case_ref = str(data.get("case", "ieee14"))
    case = load_case(case_ref, base_dir)
    valid_names = set(case.params())

    if "factors" in data:
        factors = []
        for letter, spec in data["factors"].items():
            _strict(f"factors.{letter}", spec, {"name", "low", "high"})
            if not re.fullmatch(r"[A-Z]", letter):
                raise ConfigError(f"factor letter {letter!r} must be one capital letter")
            if spec.get("name") not in valid_names:
                raise ConfigError(f"factor {letter}: unknown parameter {spec.get('name')!r}")
            try:
                factors.append(Factor(letter, spec["name"], float(spec["low"]),
                                      float(spec["high"])))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"factor {letter}: {exc}") from None
        factors = tuple(factors)
    else:
        factors = default_factors(case)
    names = [f.name for f in factors]
    if len(set(names)) != len(names):
        raise ConfigError("two factors map to the same parameter")

    normal = dict(case.params())
    for k, v in dict(data.get("normal", {})).items():
        if k not in valid_names:
            raise ConfigError(f"[normal]: unknown parameter {k!r}")
        normal[k] = float(v)

    objective = dict(data.get("objective", {}))
    _strict("objective", objective, {"weights"})
    stub = None
    if "stub" in data:
        s = dict(data["stub"])
        _strict("stub", s, {"intercept", "terms", "noise"})
        stub = StubObjective(float(s.get("intercept", 0.0)), dict(s.get("terms", {})),
                             float(s.get("noise", 0.0)))
        letters = {f.letter for f in factors}
        for powers, _ in stub.parsed_terms():
            if set(powers) - letters:
                raise ConfigError(f"stub references unknown factor(s) {sorted(set(powers) - letters)}")

    sections = {}
    allowed = {"screening": {"alpha", "method", "replicates", "randomize"},
               "anova": {"alpha", "selected", "transform", "center"},
               "rsm": {"factors", "model", "alpha", "transform"},
               "optimize": {"bounds"},
               "validate": {"n", "alpha", "alternative"}}
    for name, keys in allowed.items():
        sec = dict(data.get(name, {}))
        _strict(name, sec, keys)
        sections[name] = sec
    letters = [f.letter for f in factors]
    rsm_f = sections["rsm"].get("factors", "significant")
    if rsm_f != "significant":
        if not isinstance(rsm_f, list) or not rsm_f or any(l not in letters for l in rsm_f):
            raise ConfigError(f"[rsm].factors must be 'significant' or letters from {letters}")
    seed = int(data.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    threads = int(data.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        return PipelineConfig(
            case=case_ref, seed=seed, threads=threads,
            out_dir=str(data.get("out_dir", "gentune-out")),
            simulation=_simulation(dict(data.get("simulation", {}))),
            objective=ObjectiveSpec(objective.get("weights")),
            factors=factors, normal=normal, stub=stub, base_dir=str(base_dir), **sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load a config file; ``None`` yields the bundled IEEE14 configuration."""
    path = bundled_config_path() if path is None else Path(path)
    return config_from_mapping(read_mapping(path), path.parent)


def default_config() -> PipelineConfig:
    return config_from_mapping({})
