"""Pipeline stages (screen, anova, rsm, optimize, validate) and the run manifest.

Every stage reads its inputs from files written by earlier stages and
writes its own artifacts under ``<out_dir>/<stage>/``. ``anova`` and
``optimize`` never simulate.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from gentune import svgplot
from gentune.case_model import PowerFlowError, PowerSystemCase, solve_power_flow
from gentune.config import ConfigError, PipelineConfig, StubObjective, load_case
from gentune.doe import (
    DesignMatrix,
    Factor,
    ScreeningResult,
    effects_csv,
    estimate_effects,
    full_factorial_2k,
    full_factorial_3k,
    lenth_flag,
    normal_plot_csv,
    normal_plot_data,
)
from gentune.rsm import (
    BoxBounds,
    coefficient_inference,
    fit_least_squares,
    load_model_json,
    minimize_over_box,
    model_to_json,
    parse_model,
    surface_grid_csv,
)
from gentune.simulator import (
    ObjectiveSample,
    SimulationError,
    evaluate_objective,
    map_jobs,
    run_simulation,
)
from gentune.stats import (
    anova_residuals,
    anova_selected,
    independence_check,
    levene,
    power_transform,
    search_lambda,
    shapiro_wilk,
    two_sample_t,
    StatsError,
)

log = logging.getLogger("gentune")

STAGES = ("screen", "anova", "rsm", "optimize", "validate")
SEED_OFFSETS = {"screen": 0, "rsm": 10000, "validate_a": 20000, "validate_b": 30000}
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """A stage failed; ``exit_code`` is 1 for input problems, 2 for numerics."""

    def __init__(self, stage: str, message: str, exit_code: int = 2):
        self.stage = stage
        self.exit_code = exit_code
        super().__init__(f"stage {stage} failed: {message}")


# ---------------------------------------------------------------------------
# Small I/O helpers


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="\n")
    return path


def write_json(path: Path, doc) -> Path:
    return write_text(path, json.dumps(doc, indent=2) + "\n")


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def text_table(head: Sequence[str], rows: Sequence[Sequence[str]], title: str = "") -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    out = [title] if title else []
    out += [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(out) + "\n"


def timestamp() -> str:
    """UTC time, pinned by ``SOURCE_DATE_EPOCH`` for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class Manifest:
    """Reproducibility ledger: per stage status, inputs, seeds and outputs."""

    root: Path
    config_digest: str = ""
    stages: dict[str, dict] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST

    @classmethod
    def load(cls, root: Path) -> Manifest:
        path = root / MANIFEST
        if not path.is_file():
            return cls(root)
        doc = json.loads(path.read_text())
        return cls(root, doc.get("config_digest", ""),
                   {s["name"]: s for s in doc.get("stages", [])})

    def save(self) -> None:
        order = {n: i for i, n in enumerate(STAGES)}
        stages = sorted(self.stages.values(), key=lambda s: (order.get(s["name"], 99), s["name"]))
        doc = {"tool": "gentune", "config_digest": self.config_digest, "stages": stages}
        write_json(self.path, doc)

    def is_complete(self, name: str, inputs: Mapping[str, str]) -> bool:
        """Stage finished with identical inputs and untouched outputs."""
        s = self.stages.get(name)
        if not s or s.get("status") != "complete" or s.get("inputs") != dict(inputs):
            return False
        for rel, digest in s.get("files", {}).items():
            p = self.root / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def begin(self, name: str, inputs: Mapping[str, str]) -> None:
        self.stages[name] = {"name": name, "status": "incomplete", "inputs": dict(inputs),
                             "seeds": {}, "files": {}, "started": timestamp(), "finished": None}
        self.save()

    def finish(self, name: str, files: Sequence[Path], seeds: Mapping) -> None:
        entry = self.stages[name]
        rels = sorted(str(p.relative_to(self.root)).replace(os.sep, "/") for p in files)
        entry["files"] = {r: sha256_file(self.root / r) for r in rels}
        entry["seeds"] = dict(seeds)
        entry["status"] = "complete"
        entry["finished"] = timestamp()
        self.save()


def input_digests(root: Path, cfg_digest: str, paths: Sequence[Path]) -> dict[str, str]:
    out = {"config": cfg_digest}
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(p)
        out[str(p.relative_to(root)).replace(os.sep, "/") if p.is_relative_to(root) else str(p)] = \
            sha256_file(p)
    return out


# ---------------------------------------------------------------------------
# Objective evaluation (simulation or stub)


@dataclass
class Evaluator:
    """Maps a full parameter assignment and seed to an objective sample."""

    case: PowerSystemCase
    cfg: PipelineConfig
    _pf: object = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> Evaluator:
        return cls(load_case(cfg.case, cfg.base_dir), cfg)

    @property
    def pf(self):
        if self._pf is None:
            self._pf = solve_power_flow(self.case)
        return self._pf

    def full_params(self, point: Mapping[str, float]) -> dict[str, float]:
        params = dict(self.cfg.normal)
        params.update({k: float(v) for k, v in point.items()})
        return params

    def stub_value(self, stub: StubObjective, params: Mapping[str, float], seed: int) -> float:
        coded = {f.letter: f.encode(params[f.name]) for f in self.cfg.factors}
        y = stub.intercept
        for powers, coef in stub.parsed_terms():
            y += coef * float(np.prod([coded[l] ** p for l, p in powers.items()]))
        if stub.noise:
            y += stub.noise * float(np.random.default_rng(seed).standard_normal())
        return y

    def sample(self, point: Mapping[str, float], seed: int, keep_trace: bool = False):
        """Returns ``(ObjectiveSample, slack-bus voltage trace or None)``."""
        params = self.full_params(point)
        if self.cfg.stub is not None:
            y = self.stub_value(self.cfg.stub, params, seed)
            return ObjectiveSample(y, {}, seed, params), None
        sim = replace(self.cfg.simulation, seed=seed)
        trace = run_simulation(self.case, params, sim, pf=self.pf)
        obs = evaluate_objective(trace, self.cfg.objective)
        slack = next(i for i, b in enumerate(self.case.buses) if b.kind == "slack")
        return obs, (trace.time, trace.v[:, slack].copy()) if keep_trace else None

    def run_many(self, jobs: Sequence[tuple[Mapping[str, float], int, str]],
                 threads: int = 1, keep_trace: bool = False) -> list:
        if self.cfg.stub is None:
            _ = self.pf  # solve once before fanning out

        def one(job):
            point, seed, tag = job
            try:
                return self.sample(point, seed, keep_trace)
            except SimulationError as exc:
                raise SimulationError(f"{tag} (seed {seed}): {exc}", step=exc.step,
                                      residual=exc.residual, iterations=exc.iterations) from None

        return map_jobs(one, jobs, threads)


def responses_csv(rows: Sequence[tuple[object, int, int, ObjectiveSample]],
                  key: str = "run_id") -> str:
    """``<key>, replicate, seed, y`` plus one column per IAE channel."""
    channels = list(rows[0][3].iae) if rows else []
    out = io.StringIO()
    out.write(",".join([key, "replicate", "seed", "y"] + [f"iae_{c}" for c in channels]) + "\n")
    for run_id, rep, seed, s in rows:
        cells = [str(run_id), str(rep), str(seed), repr(float(s.y))]
        cells += [repr(float(s.iae[c])) for c in channels]
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def run_means(path: Path, n_runs: int) -> np.ndarray:
    """Mean response per run id (1-based) from a responses CSV."""
    sums = np.zeros(n_runs)
    counts = np.zeros(n_runs)
    for row in read_csv(path):
        i = int(row["run_id"]) - 1
        if not 0 <= i < n_runs:
            raise ConfigError(f"{path}: run_id {row['run_id']} outside the design")
        sums[i] += float(row["y"])
        counts[i] += 1
    if np.any(counts == 0):
        missing = [i + 1 for i in np.flatnonzero(counts == 0)]
        raise ConfigError(f"{path}: no responses for runs {missing[:5]}")
    return sums / counts


def design_from_csv(path: Path) -> DesignMatrix:
    rows = read_csv(path)
    if not rows:
        raise ConfigError(f"{path}: empty design")
    head = list(rows[0])
    letters = [h for h in head if len(h) == 1 and h.isupper()]
    names = head[1 + len(letters):1 + 2 * len(letters)]
    coded = np.array([[float(r[l]) for l in letters] for r in rows])
    phys = np.array([[float(r[n]) for n in names] for r in rows])
    factors = []
    for j, (l, n) in enumerate(zip(letters, names)):
        lo = phys[coded[:, j] == -1, j]
        hi = phys[coded[:, j] == 1, j]
        factors.append(Factor(l, n, float(lo[0]), float(hi[0])))
    levels = 3 if np.any(coded == 0) else 2
    order = tuple(int(r["run_order"]) for r in rows) if "run_order" in head else ()
    return DesignMatrix(tuple(factors), coded, levels, order)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


# ---------------------------------------------------------------------------
# Stages


@dataclass
class StageResult:
    files: list[Path]
    seeds: dict
    summary: str = ""
    data: dict = field(default_factory=dict)


def stage_screen(cfg: PipelineConfig, root: Path, threads: int = 1,
                 evaluator: Evaluator | None = None) -> StageResult:
    ev = evaluator or Evaluator.from_config(cfg)
    sc = cfg.screening
    reps = int(sc.get("replicates", 1))
    alpha = float(sc.get("alpha", 0.05))
    design = full_factorial_2k(cfg.factors)
    if sc.get("randomize", True):
        design = design.randomized(cfg.seed)
    base = cfg.seed + SEED_OFFSETS["screen"]
    jobs, meta = [], []
    for r in range(len(design.runs)):
        for rep in range(reps):
            seed = base + r + rep * len(design.runs)
            jobs.append((design.assignment(r), seed, f"screening run {r + 1}"))
            meta.append((r + 1, rep, seed))
    samples = [s for s, _ in ev.run_many(jobs, threads)]
    rows = [(m[0], m[1], m[2], s) for m, s in zip(meta, samples)]
    out = root / "screen"
    files = [write_text(out / "design.csv", design.to_csv()),
             write_text(out / "responses.csv", responses_csv(rows))]
    y = run_means(out / "responses.csv", len(design.runs))
    effects = estimate_effects(design, y)
    method = sc.get("method", "sme")
    if len(effects) >= 7:
        res = lenth_flag(effects, alpha, method)
    else:
        # too few effects for a pseudo standard error: report, flag nothing
        labels, values, quantiles = normal_plot_data(effects)
        res = ScreeningResult(labels=labels, effects=values, quantiles=quantiles,
                              lenth_pse=float("nan"), margin=float("nan"), flagged=[],
                              alpha=alpha, method="none (fewer than 7 effects)")
    files.append(write_text(out / "effects.csv", effects_csv(effects)))
    files.append(write_text(out / "normal_plot.csv", normal_plot_csv(res)))
    files.append(write_text(out / "normal_plot.svg", svgplot.scatter(
        res.effects, res.quantiles, res.labels, title="Normal probability plot of effects",
        xlabel="effect", ylabel="normal quantile", highlight=res.flagged)))
    files.append(write_json(out / "screening.json", {
        "flagged": res.flagged,
        "lenth_pse": res.lenth_pse if np.isfinite(res.lenth_pse) else None,
        "margin": res.margin if np.isfinite(res.margin) else None,
        "alpha": alpha, "method": res.method, "runs": len(design.runs), "replicates": reps}))
    top = sorted(effects, key=lambda e: -abs(e.effect))[:10]
    summary = text_table(("Effect", "Estimate", "SS"),
                         [(e.label, _fmt(e.effect), _fmt(e.ss)) for e in top],
                         "Largest effects")
    summary += (f"Lenth PSE {_fmt(res.lenth_pse)}, margin {_fmt(res.margin)} "
                f"({res.method}); flagged: {', '.join(res.flagged) or 'none'}\n")
    seeds = {"first": base, "last": base + len(jobs) - 1, "count": len(jobs)}
    return StageResult(files, seeds, summary, {"flagged": res.flagged})


def stage_anova(root: Path, design_path: Path, responses_path: Path,
                selected: Sequence[str] | str | None, transform: str | float = "auto",
                alpha: float = 0.05, center: str = "mean") -> StageResult:
    """ANOVA with assumption checks on files from a screening stage."""
    design = design_from_csv(design_path)
    y = run_means(responses_path, len(design.runs))
    rule = "explicit"
    if selected is None or selected == "flagged":
        sj = design_path.parent / "screening.json"
        flagged = json.loads(sj.read_text())["flagged"] if sj.is_file() else []
        if flagged:
            selected, rule = flagged, "flagged by screening"
        else:
            selected, rule = list(design.letters), "all main effects (nothing flagged)"
    elif isinstance(selected, str):
        selected = [s.strip() for s in selected.split(",") if s.strip()]
    if not selected:
        raise ConfigError("empty effect selection")

    mains = [l for l in design.letters if any(l in s for s in selected)]
    groupings = [design.sign_column(l) for l in mains]

    def levene_all(data):
        out = {}
        for l, g in zip(mains, groupings):
            r = levene([data[g < 0], data[g > 0]], center)
            out[l] = {"statistic": r.statistic, "p_value": r.p_value,
                      "verdict": "pass" if r.p_value >= alpha else "fail"}
        return out

    before = levene_all(y)
    search = None
    if transform in ("none", None):
        lam = 1.0
    elif transform == "auto":
        if all(v["verdict"] == "pass" for v in before.values()):
            lam = 1.0
        else:
            search = search_lambda(y, groupings, center=center)
            lam = search.lam
    else:
        try:
            lam = float(transform)
        except ValueError:
            raise ConfigError(f"transform must be none, auto or a number, got {transform!r}") from None
    ty = y if lam == 1.0 else power_transform(y, lam)
    after = levene_all(ty)
    table = anova_selected(design, ty, selected, alpha)
    resid = anova_residuals(design, ty, selected)
    checks: dict = {}
    try:
        sw = shapiro_wilk(resid)
        checks["normality"] = {"W": sw.w, "p_value": sw.p_value,
                               "verdict": "pass" if sw.p_value >= alpha else "fail"}
    except StatsError as exc:
        checks["normality"] = {"error": str(exc), "verdict": "fail"}
    try:
        ind = independence_check(resid, design.run_order or None, alpha)
        checks["independence"] = {"durbin_watson": ind.durbin_watson, "dw_p_value": ind.dw_p,
                                  "runs": ind.runs, "runs_z": ind.runs_z,
                                  "runs_p_value": ind.runs_p,
                                  "verdict": "pass" if ind.verdict == "not rejected" else "fail"}
    except StatsError as exc:
        checks["independence"] = {"error": str(exc), "verdict": "fail"}
    checks["homoscedasticity"] = {
        "verdict": "pass" if all(v["verdict"] == "pass" for v in after.values()) else "fail"}

    out = root / "anova"
    files = [write_text(out / "anova.csv", table.to_csv()),
             write_text(out / "anova.txt", table.to_text(f"ANOVA (lambda = {lam:g})"))]
    lev_rows = [(l, _fmt(before[l]["statistic"]), _fmt(before[l]["p_value"]),
                 _fmt(after[l]["statistic"]), _fmt(after[l]["p_value"])) for l in mains]
    lev_head = ("Factor", "Levene", "P-Value", "Levene (transformed)", "P-Value (transformed)")
    lev_csv = "\n".join([",".join(lev_head)] + [",".join(r) for r in (
        (l, repr(before[l]["statistic"]), repr(before[l]["p_value"]),
         repr(after[l]["statistic"]), repr(after[l]["p_value"])) for l in mains)]) + "\n"
    files.append(write_text(out / "levene.csv", lev_csv))
    files.append(write_text(out / "transformed.csv", "run_id,y,y_transformed\n" + "".join(
        f"{i + 1},{float(a)!r},{float(b)!r}\n" for i, (a, b) in enumerate(zip(y, ty)))))
    if search is not None:
        files.append(write_text(out / "lambda_search.csv", "lambda,max_levene\n" + "".join(
            f"{float(l)!r},{float(c)!r}\n" for l, c in zip(search.grid, search.criterion))))
    doc = {"selected": list(table.rows[i].source for i in range(len(table.rows))),
           "selection_rule": rule, "lambda": lam,
           "transform": "searched" if search is not None else str(transform),
           "alpha": alpha, "levene_before": before, "levene_after": after,
           "assumptions": checks, "significant": table.significant()}
    files.append(write_json(out / "anova.json", doc))
    summary = text_table(lev_head, lev_rows, "Levene's test per factor")
    summary += table.to_text(f"ANOVA (lambda = {lam:g})")
    summary += "Assumptions: " + ", ".join(f"{k} {v['verdict']}" for k, v in checks.items()) + "\n"
    return StageResult(files, {}, summary, doc)


def default_model(k: int) -> str:
    terms = ["1"] + [f"x{i}" for i in range(1, k + 1)]
    terms += [f"x{i}*x{j}" for i in range(1, k + 1) for j in range(i + 1, k + 1)]
    terms += [f"x{i}^2" for i in range(1, k + 1)]
    return ",".join(terms)


def rsm_factor_letters(cfg: PipelineConfig, root: Path) -> list[str]:
    spec = cfg.rsm.get("factors", "significant")
    if spec != "significant":
        return list(spec)
    doc = json.loads((root / "anova" / "anova.json").read_text())
    letters = [f.letter for f in cfg.factors
               if any(f.letter in s for s in doc["significant"])]
    if not letters:
        raise ConfigError("no significant factor to carry into the response surface")
    return letters


def stage_rsm(cfg: PipelineConfig, root: Path, letters: Sequence[str],
              model: str | None = None, threads: int = 1,
              evaluator: Evaluator | None = None) -> StageResult:
    ev = evaluator or Evaluator.from_config(cfg)
    factors = [cfg.factor(l) for l in letters]
    names = [f.name for f in factors]
    model = model or cfg.rsm.get("model") or default_model(len(factors))
    spec = parse_model(model, names)
    alpha = float(cfg.rsm.get("alpha", 0.05))
    design = full_factorial_3k(factors)
    base = cfg.seed + SEED_OFFSETS["rsm"]
    jobs = [(design.assignment(r), base + r, f"3^k run {r + 1}") for r in range(len(design.runs))]
    samples = [s for s, _ in ev.run_many(jobs, threads)]
    y = np.array([s.y for s in samples])
    out = root / "rsm"
    files = [write_text(out / "design.csv", design.to_csv()),
             write_text(out / "responses.csv", responses_csv(
                 [(r + 1, 0, base + r, s) for r, s in enumerate(samples)]))]
    lam = cfg.rsm.get("transform", "none")
    if lam not in ("none", None):
        # only order-preserving exponents: the optimizer minimizes the fitted surface
        if isinstance(lam, bool) or not isinstance(lam, (int, float)) or lam < 0:
            raise ConfigError(f"[rsm].transform must be 'none' or a number >= 0, got {lam!r}")
        y = power_transform(y, float(lam))
    fit = fit_least_squares(design.physical(), y, spec, alpha)
    active = spec.active_factors
    bounds = BoxBounds.from_mapping({f.name: (f.low, f.high) for f in factors if f.name in active})
    normal = {n: cfg.normal[n] for n in sorted(cfg.normal)}
    files.append(write_text(out / "model.json", model_to_json(fit, bounds, normal)))
    files.append(write_text(out / "model_anova.csv", fit.anova.to_csv()))
    inf = coefficient_inference(fit, alpha)
    head = ("Term", "Coefficient", "SE", "t0", "P-Value", "CI low", "CI high")
    files.append(write_text(out / "coefficients.csv", ",".join(head) + "\n" + "".join(
        ",".join([i.label] + [repr(v) for v in (i.coefficient, i.se, i.t0, i.p_value,
                                                i.ci_low, i.ci_high)]) + "\n" for i in inf)))
    fixed = {n: cfg.normal[n] for n in names if n not in active}
    grid = surface_grid_csv(fit.polynomial, bounds, fixed)
    files.append(write_text(out / "surface.csv", grid))
    files.append(write_text(out / "surface.svg", _surface_svg(grid, bounds)))
    summary = fit.anova.to_text("Regression ANOVA")
    summary += text_table(head, [(i.label, _fmt(i.coefficient), _fmt(i.se), f"{i.t0:.4f}",
                                  f"{i.p_value:.4g}", _fmt(i.ci_low), _fmt(i.ci_high))
                                 for i in inf], "Coefficient inference")
    summary += f"R^2 = {fit.r_squared:.4f}\n"
    seeds = {"first": base, "last": base + len(jobs) - 1, "count": len(jobs)}
    return StageResult(files, seeds, summary, {"model": model})


def _surface_svg(grid_csv: str, bounds: BoxBounds) -> str:
    rows = list(csv.reader(io.StringIO(grid_csv)))
    head, data = rows[0], np.array(rows[1:], dtype=float)
    if len(head) == 2:
        return svgplot.lines(data[:, 0], [("surface", data[:, 1])], title="Fitted response",
                             xlabel=head[0], ylabel="y")
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    z = data[:, 2].reshape(len(xs), len(ys))
    i, j = np.unravel_index(np.argmin(z), z.shape)
    return svgplot.heatmap(xs, ys, z, title="Fitted response surface", xlabel=head[0],
                           ylabel=head[1], marker=(xs[i], ys[j]))


def parse_bounds(text: str) -> dict[str, tuple[float, float]]:
    """``"K_A2=25:500,K_A1=25:500"`` -> mapping."""
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            name, rng = part.split("=")
            lo, hi = rng.split(":")
            out[name.strip()] = (float(lo), float(hi))
        except ValueError:
            raise ConfigError(f"bad bounds entry {part!r}; expected NAME=LO:HI") from None
    for name, (lo, hi) in out.items():
        if not lo < hi:
            raise ConfigError(f"bounds for {name} are inverted or empty ({lo} >= {hi})")
    return out


def stage_optimize(root: Path, model_path: Path, bounds: Mapping | None = None,
                   normal: Mapping[str, float] | None = None) -> StageResult:
    poly, embedded, doc = load_model_json(model_path.read_text())
    if bounds:
        box = BoxBounds.from_mapping(bounds)
    elif embedded is not None:
        box = embedded
    else:
        raise ConfigError("model file carries no bounds; pass --bounds")
    unknown = [n for n in box.names if n not in poly.spec.factors]
    if unknown:
        raise ConfigError(f"bounds name(s) {unknown} are not model factors {list(poly.spec.factors)}")
    normal = dict(doc.get("normal", {})) if normal is None else dict(normal)
    fixed = {f: normal[f] for f in poly.spec.factors if f not in box.names and f in normal}
    opt = minimize_over_box(poly, box, fixed)
    params = dict(normal)
    params.update({n: float(v) for n, v in zip(opt.names, opt.point)})
    out = root / "optimize"
    files = [write_json(out / "optimum.json", opt.as_dict()),
             write_json(out / "params.json", dict(sorted(params.items())))]
    rows = [(n, f"{params[n]:.4f}", "optimal" if n in opt.names else "normal")
            for n in sorted(params)]
    table = text_table(("Parameter", "Value", "Source"), rows, "Parameter set")
    files.append(write_text(out / "params.txt", table))
    summary = table + (f"objective {opt.value:.6g} at {opt.location} point, "
                       f"KKT {'satisfied' if opt.kkt_ok else 'NOT satisfied'}\n")
    return StageResult(files, {}, summary, {"params": params, "optimum": opt.as_dict()})


def read_params(path: Path) -> dict[str, float]:
    if not Path(path).is_file():
        raise ConfigError(f"parameter file not found: {path}")
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not all(isinstance(v, (int, float)) for v in doc.values()):
        raise ConfigError(f"{path}: expected a flat JSON object of parameter values")
    return {k: float(v) for k, v in doc.items()}


def stage_validate(cfg: PipelineConfig, root: Path, params_a: Mapping[str, float],
                   params_b: Mapping[str, float], n: int | None = None,
                   alpha: float | None = None, paired_seeds: bool = False, threads: int = 1,
                   evaluator: Evaluator | None = None) -> StageResult:
    ev = evaluator or Evaluator.from_config(cfg)
    n = int(n if n is not None else cfg.validate.get("n", 20))
    alpha = float(alpha if alpha is not None else cfg.validate.get("alpha", 0.05))
    alternative = cfg.validate.get("alternative", "greater")
    if n < 2:
        raise ConfigError("validation needs n >= 2")
    base_a = cfg.seed + SEED_OFFSETS["validate_a"]
    base_b = base_a if paired_seeds else cfg.seed + SEED_OFFSETS["validate_b"]
    jobs = ([(params_a, base_a + r, f"set A replicate {r}") for r in range(n)]
            + [(params_b, base_b + r, f"set B replicate {r}") for r in range(n)])
    results = ev.run_many(jobs, threads, keep_trace=True)
    ya = np.array([s.y for s, _ in results[:n]])
    yb = np.array([s.y for s, _ in results[n:]])
    lev = levene([ya, yb])
    tt = two_sample_t(ya, yb, alpha, alternative)
    out = root / "validate"
    rows = ([("A", r, base_a + r, s) for r, (s, _) in enumerate(results[:n])]
            + [("B", r, base_b + r, s) for r, (s, _) in enumerate(results[n:])])
    files = [write_text(out / "samples.csv", responses_csv(rows, key="set"))]
    report = {"t0": tt.t0, "P-Value": tt.p_one_sided if alternative != "two-sided" else tt.p_two_sided,
              "alpha": alpha, "Conclusion": tt.decision, "dof": tt.dof,
              "alternative": alternative, "p_two_sided": tt.p_two_sided,
              "mean_a": tt.mean_a, "mean_b": tt.mean_b,
              "levene": {"statistic": lev.statistic, "p_value": lev.p_value,
                         "verdict": "pass" if lev.p_value >= alpha else "fail"},
              "params_a": dict(sorted(params_a.items())), "params_b": dict(sorted(params_b.items())),
              "n": n, "paired_seeds": paired_seeds}
    files.append(write_json(out / "ttest.json", report))
    files.append(write_text(out / "ttest.csv", "t0,P-Value,alpha,Conclusion\n"
                            f"{tt.t0!r},{report['P-Value']!r},{alpha!r},{tt.decision}\n"))
    table = text_table(("t0", "P-Value", "α", "Conclusion"),
                       [(f"{tt.t0:.4f}", f"{report['P-Value']:.4g}", f"{alpha:g}", tt.decision)],
                       "Two-sample t test (set A vs set B)")
    files.append(write_text(out / "ttest.txt", table))
    if results[0][1] is not None:
        files += _trace_outputs(out, results, n)
    summary = table + (f"mean A {tt.mean_a:.6g}, mean B {tt.mean_b:.6g}; Levene P "
                       f"{lev.p_value:.4g}\n")
    seeds = {"set_a": {"first": base_a, "last": base_a + n - 1},
             "set_b": {"first": base_b, "last": base_b + n - 1}}
    return StageResult(files, seeds, summary, report)


def _trace_outputs(out: Path, results, n: int) -> list[Path]:
    t = results[0][1][0]
    va = np.array([tr[1] for _, tr in results[:n]])
    vb = np.array([tr[1] for _, tr in results[n:]])
    head = ["t"] + [f"A_{r}" for r in range(n)] + [f"B_{r}" for r in range(n)]
    obs = np.column_stack([t, va.T, vb.T])
    files = [write_text(out / "slack_voltage_observations.csv", ",".join(head) + "\n" + "".join(
        ",".join(repr(float(v)) for v in row) + "\n" for row in obs))]
    mean = np.column_stack([t, va.mean(axis=0), vb.mean(axis=0)])
    files.append(write_text(out / "slack_voltage_mean.csv", "t,mean_A,mean_B\n" + "".join(
        ",".join(repr(float(v)) for v in row) + "\n" for row in mean)))
    files.append(write_text(out / "slack_voltage_observations.svg", svgplot.lines(
        t, [(f"set A#{r}", va[r]) for r in range(n)] + [(f"set B#{r}", vb[r]) for r in range(n)],
        title="Slack bus voltage observations", xlabel="t [s]", ylabel="V [p.u.]",
        colors=[svgplot.PALETTE[0]] * n + [svgplot.PALETTE[1]] * n, width=0.6)))
    files.append(write_text(out / "slack_voltage_mean.svg", svgplot.lines(
        t, [("set A", mean[:, 1]), ("set B", mean[:, 2])], title="Mean slack bus voltage",
        xlabel="t [s]", ylabel="V [p.u.]")))
    return files


# ---------------------------------------------------------------------------
# Orchestration


def run_stage(manifest: Manifest, name: str, inputs: Sequence[Path],
              fn: Callable[[], StageResult], cfg_digest: str, force: bool = False,
              echo: Callable[[str], None] | None = None) -> StageResult | None:
    """Run ``fn`` unless the manifest shows it complete for these inputs."""
    digests = input_digests(manifest.root, cfg_digest, inputs)
    if not force and manifest.is_complete(name, digests):
        log.info("stage %s up to date, skipping", name)
        return None
    manifest.begin(name, digests)
    try:
        res = fn()
    except (SimulationError, PowerFlowError) as exc:
        raise StageError(name, str(exc), 2) from exc
    except (ConfigError, StatsError, ValueError, KeyError, FileNotFoundError) as exc:
        raise StageError(name, str(exc), 1) from exc
    manifest.finish(name, res.files, res.seeds)
    if echo and res.summary:
        echo(f"== {name} ==\n{res.summary}")
    return res


def run_pipeline(cfg: PipelineConfig, root: Path, threads: int = 1,
                 echo: Callable[[str], None] | None = None,
                 stages: Sequence[str] = STAGES) -> Manifest:
    """screen -> anova -> rsm -> optimize -> validate, resuming completed stages."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(root)
    digest = cfg.digest()
    if manifest.config_digest and manifest.config_digest != digest:
        log.info("configuration changed; rerunning every stage")
    manifest.config_digest = digest
    ev = Evaluator.from_config(cfg)
    rerun = False  # once a stage reruns, all later stages rerun too
    an = cfg.anova

    def go(name, inputs, fn):
        nonlocal rerun
        res = run_stage(manifest, name, inputs, fn, digest, rerun, echo)
        rerun = rerun or res is not None

    s = root / "screen"
    if "screen" in stages:
        go("screen", [], lambda: stage_screen(cfg, root, threads, ev))
    if "anova" in stages:
        go("anova", [s / "design.csv", s / "responses.csv", s / "screening.json"],
           lambda: stage_anova(root, s / "design.csv", s / "responses.csv",
                               an.get("selected", "flagged"), an.get("transform", "auto"),
                               float(an.get("alpha", 0.05)), an.get("center", "mean")))
    if "rsm" in stages:
        rsm_inputs = [root / "anova" / "anova.json"] if cfg.rsm.get(
            "factors", "significant") == "significant" else []
        go("rsm", rsm_inputs,
           lambda: stage_rsm(cfg, root, rsm_factor_letters(cfg, root), None, threads, ev))
    if "optimize" in stages:
        bounds = cfg.optimize.get("bounds")
        go("optimize", [root / "rsm" / "model.json"],
           lambda: stage_optimize(root, root / "rsm" / "model.json", bounds, cfg.normal))
    if "validate" in stages:
        p = root / "optimize" / "params.json"
        go("validate", [p],
           lambda: stage_validate(cfg, root, cfg.normal, read_params(p), threads=threads,
                                  evaluator=ev))
    return manifest
