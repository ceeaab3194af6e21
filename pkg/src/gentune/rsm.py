"""Monomial response surfaces: least-squares fit, significance tables and
box-constrained minimization.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from gentune.stats import AnovaTable, anova_table, dist_ppf, dist_sf

__all__ = [
    "BoxBounds",
    "FittedSurface",
    "ModelSpec",
    "ModelSpecError",
    "Optimum",
    "Polynomial",
    "RankDeficientError",
    "TermInference",
    "coefficient_inference",
    "evaluate_surface",
    "fit_least_squares",
    "load_model_json",
    "minimize_over_box",
    "model_anova",
    "model_anova_from_ss",
    "parse_model",
    "term_inference",
]


class ModelSpecError(ValueError):
    pass


class RankDeficientError(ValueError):
    def __init__(self, term: str):
        self.term = term
        super().__init__(f"design matrix is rank deficient at term {term}")


@dataclass(frozen=True)
class ModelSpec:
    """Polynomial basis: one exponent tuple per term over ``factors``."""

    factors: tuple[str, ...]
    terms: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        k = len(self.factors)
        if any(len(t) != k for t in self.terms):
            raise ModelSpecError("every term needs one exponent per factor")
        if len(set(self.terms)) != len(self.terms):
            raise ModelSpecError("duplicate terms")
        if (0,) * k not in self.terms:
            raise ModelSpecError("the constant term is required")
        if any(e < 0 for t in self.terms for e in t):
            raise ModelSpecError("exponents must be nonnegative")

    def term_label(self, term: tuple[int, ...]) -> str:
        parts = [f if e == 1 else f"{f}^{e}" for f, e in zip(self.factors, term) if e]
        return "*".join(parts) if parts else "1"

    @property
    def labels(self) -> list[str]:
        return [self.term_label(t) for t in self.terms]

    @property
    def active_factors(self) -> list[str]:
        """Factors with a nonzero exponent in at least one term."""
        return [f for j, f in enumerate(self.factors) if any(t[j] for t in self.terms)]

    def basis(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        if x.shape[1] != len(self.factors):
            raise ValueError(f"points must have {len(self.factors)} columns")
        return np.column_stack([np.prod(x ** np.array(t), axis=1) for t in self.terms])


_TERM_RE = re.compile(r"^x(\d+)(?:\^(\d+))?$")


def parse_model(text: str, factors: Sequence[str]) -> ModelSpec:
    """Parse ``"1,x1,x2,x2^2,x1^2*x2"``; ``xj`` is the j-th entry of ``factors``."""
    k = len(factors)
    terms = []
    pos = 0
    for raw in text.split(","):
        token = raw.strip()
        locus = f"column {pos + 1} ({token!r})"
        pos += len(raw) + 1
        if not token:
            raise ModelSpecError(f"empty term at {locus}")
        exps = [0] * k
        if token != "1":
            for part in token.split("*"):
                m = _TERM_RE.match(part.strip())
                if not m:
                    raise ModelSpecError(f"cannot parse term at {locus}")
                j = int(m.group(1))
                if not 1 <= j <= k:
                    raise ModelSpecError(f"x{j} out of range 1..{k} at {locus}")
                exps[j - 1] += int(m.group(2) or 1)
        terms.append(tuple(exps))
    try:
        return ModelSpec(tuple(factors), tuple(terms))
    except ModelSpecError as exc:
        raise ModelSpecError(f"{exc} in {text!r}") from None


@dataclass(frozen=True)
class Polynomial:
    spec: ModelSpec
    coefficients: np.ndarray

    def value(self, point) -> float:
        return float(self.spec.basis(point)[0] @ self.coefficients)

    def values(self, points) -> np.ndarray:
        return self.spec.basis(points) @ self.coefficients

    def gradient(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        g = np.zeros(len(x))
        for c, t in zip(self.coefficients, self.spec.terms):
            for j, e in enumerate(t):
                if e:
                    t2 = list(t)
                    t2[j] -= 1
                    g[j] += c * e * np.prod(x ** np.array(t2))
        return g

    def hessian(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        k = len(x)
        hm = np.zeros((k, k))
        for c, t in zip(self.coefficients, self.spec.terms):
            for i, j in itertools.product(range(k), repeat=2):
                t2 = list(t)
                fac = t2[i]
                t2[i] -= 1
                if fac == 0:
                    continue
                fac *= t2[j]
                t2[j] -= 1
                if fac == 0:
                    continue
                hm[i, j] += c * fac * np.prod(x ** np.array(t2))
        return hm


@dataclass(frozen=True)
class TermInference:
    label: str
    coefficient: float
    se: float
    t0: float
    p_value: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class FittedSurface:
    spec: ModelSpec
    coefficients: np.ndarray
    se: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    points: np.ndarray
    responses: np.ndarray
    sse: float
    dof_error: int
    r_squared: float
    alpha: float = 0.05
    inference: list[TermInference] = field(default_factory=list)
    anova: AnovaTable | None = None

    @property
    def polynomial(self) -> Polynomial:
        return Polynomial(self.spec, self.coefficients)


def term_inference(label: str, beta: float, se: float, dof: int, alpha: float = 0.05,
                   negligible: bool = False) -> TermInference:
    """t statistic, two-sided P and (1 - alpha) CI for one coefficient."""
    q = dist_ppf("t", (dof,), 1.0 - alpha / 2.0)
    if negligible or (se == 0.0 and beta == 0.0):
        t0, p = 0.0, 1.0
    elif se == 0.0:
        t0, p = float(np.sign(beta)) * np.inf, 0.0
    else:
        t0 = beta / se
        p = float(min(1.0, 2.0 * dist_sf("t", (dof,), abs(t0))))
    return TermInference(label, float(beta), float(se), float(t0), p,
                         float(beta - q * se), float(beta + q * se))


def fit_least_squares(points, responses, spec: ModelSpec, alpha: float = 0.05) -> FittedSurface:
    """Ordinary least squares on the monomial basis via column-scaled QR."""
    x = spec.basis(points)
    y = np.asarray(responses, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("responses length must equal the number of points")
    if n < p:
        raise RankDeficientError(spec.labels[n])
    scale = np.linalg.norm(x, axis=0)
    scale[scale == 0] = 1.0
    xs = x / scale
    # locate the first dependent column, if any
    sv_tol = max(n, p) * np.finfo(float).eps * 1e3
    for j in range(1, p + 1):
        s = np.linalg.svd(xs[:, :j], compute_uv=False)
        if s[-1] <= sv_tol * s[0]:
            raise RankDeficientError(spec.labels[j - 1])
    q, r = np.linalg.qr(xs)
    beta = np.linalg.solve(r, q.T @ y) / scale
    fitted = x @ beta
    resid = y - fitted
    sse = float(resid @ resid)
    sst = float(np.sum((y - y.mean()) ** 2))
    dof = n - p
    perfect = sse <= 1e-24 * max(sst, float(y @ y), 1e-300)
    if perfect:
        sse = 0.0
    if dof > 0:
        sigma2 = sse / dof
        rinv = np.linalg.solve(r, np.eye(p))
        cov = sigma2 * (rinv @ rinv.T) / np.outer(scale, scale)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    else:
        se = np.full(p, np.nan)
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    fit = FittedSurface(spec=spec, coefficients=beta, se=se, residuals=resid, fitted=fitted,
                        points=np.atleast_2d(np.asarray(points, dtype=float)), responses=y,
                        sse=sse, dof_error=dof, r_squared=float(min(max(r2, 0.0), 1.0)),
                        alpha=alpha)
    if dof > 0:
        ynorm = float(np.linalg.norm(y)) or 1.0
        contrib = np.abs(beta) * scale
        inf = [term_inference(lbl, b, s, dof, alpha,
                              negligible=perfect and c <= 1e-10 * ynorm)
               for lbl, b, s, c in zip(spec.labels, beta, se, contrib)]
        object.__setattr__(fit, "inference", inf)
        object.__setattr__(fit, "anova", model_anova(fit, alpha))
    return fit


def model_anova_from_ss(ss_model: float, dof_model: int, ss_error: float, dof_error: int,
                        alpha: float = 0.05) -> AnovaTable:
    return anova_table([("Model", ss_model, dof_model)], ss_error, dof_error, alpha)


def model_anova(fit: FittedSurface, alpha: float = 0.05) -> AnovaTable:
    """Regression significance: model (p - 1 DoF) against residual error."""
    y = fit.responses
    sst = float(np.sum((y - y.mean()) ** 2))
    ss_model = max(sst - fit.sse, 0.0)
    if ss_model <= 1e-12 * max(sst, float(y @ y), 1e-300):
        ss_model = 0.0
    return model_anova_from_ss(ss_model, len(fit.spec.terms) - 1, fit.sse, fit.dof_error, alpha)


def coefficient_inference(fit: FittedSurface, alpha: float = 0.05) -> list[TermInference]:
    if fit.dof_error <= 0:
        raise ValueError("coefficient inference needs n > p")
    if alpha == fit.alpha and fit.inference:
        return list(fit.inference)
    return [term_inference(i.label, i.coefficient, i.se, fit.dof_error, alpha,
                           negligible=(i.t0 == 0.0 and i.p_value == 1.0 and i.se == 0.0))
            for i in fit.inference]


def evaluate_surface(surface: FittedSurface | Polynomial, point) -> float:
    poly = surface.polynomial if isinstance(surface, FittedSurface) else surface
    return poly.value(point)


# ---------------------------------------------------------------------------
# Box-constrained minimization


@dataclass(frozen=True)
class BoxBounds:
    names: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) >= np.asarray(self.hi)):
            raise ValueError("every bound needs lo < hi")

    @classmethod
    def from_mapping(cls, bounds: Mapping[str, Sequence[float]]) -> BoxBounds:
        names = tuple(bounds)
        return cls(names, np.array([float(bounds[n][0]) for n in names]),
                   np.array([float(bounds[n][1]) for n in names]))

    def as_dict(self) -> dict[str, list[float]]:
        return {n: [float(a), float(b)] for n, a, b in zip(self.names, self.lo, self.hi)}


@dataclass(frozen=True)
class Optimum:
    names: tuple[str, ...]
    point: np.ndarray
    value: float
    location: str  # "interior" | "boundary"
    stationarity: float  # max |gradient| over free coordinates
    active: tuple[str, ...]  # e.g. ("K_A1@hi",)
    kkt_ok: bool
    gradient: np.ndarray

    def as_dict(self) -> dict:
        return {"point": {n: float(v) for n, v in zip(self.names, self.point)},
                "value": self.value, "location": self.location,
                "stationarity_residual": self.stationarity, "active_bounds": list(self.active),
                "kkt_satisfied": self.kkt_ok,
                "gradient": [float(g) for g in self.gradient]}


def _restricted(poly: Polynomial, names: Sequence[str], fixed: Mapping[str, float]):
    """value/grad/hess over ``names`` with other factors held at ``fixed``."""
    factors = poly.spec.factors
    pos = [factors.index(n) for n in names]
    base = np.array([float(fixed.get(f, 0.0)) for f in factors])

    def full(u):
        z = base.copy()
        z[pos] = u
        return z

    return (lambda u: poly.value(full(u)),
            lambda u: poly.gradient(full(u))[pos],
            lambda u: poly.hessian(full(u))[np.ix_(pos, pos)])


def _polish(u, lo, hi, fun, grad, hess, iters: int = 100):
    """Projected Newton refinement with projected-gradient fallback."""
    u = np.clip(np.asarray(u, dtype=float), lo, hi)
    span = hi - lo
    for _ in range(iters):
        g = grad(u)
        at_lo = (u <= lo) & (g > 0)
        at_hi = (u >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        if not np.any(free) or np.max(np.abs(g[free])) == 0.0:
            break
        h = hess(u)[np.ix_(free, free)]
        step = np.zeros_like(u)
        try:
            np.linalg.cholesky(h)
            step[free] = -np.linalg.solve(h, g[free])
        except np.linalg.LinAlgError:
            step[free] = -g[free] / np.max(np.abs(g[free])) * 0.1 * span[free]
        f0 = fun(u)
        t = 1.0
        while t > 1e-12:
            cand = np.clip(u + t * step, lo, hi)
            if fun(cand) <= f0:
                break
            t *= 0.5
        else:
            break
        if np.all(cand == u):
            break
        u = cand
    return u


def minimize_over_box(surface: FittedSurface | Polynomial, bounds: BoxBounds | Mapping,
                      fixed: Mapping[str, float] | None = None, grid_points: int = 21,
                      n_starts: int = 8, kkt_tol: float = 1e-8) -> Optimum:
    """Global minimum of a polynomial over a box.

    Multi-start L-BFGS-B from the best points of a ``grid_points``-per-axis
    grid, followed by projected-Newton polishing and a KKT check. Factors of
    the model outside ``bounds`` are held at ``fixed``.
    """
    poly = surface.polynomial if isinstance(surface, FittedSurface) else surface
    if not isinstance(bounds, BoxBounds):
        bounds = BoxBounds.from_mapping(bounds)
    fixed = dict(fixed or {})
    names = bounds.names
    missing = [f for f in poly.spec.active_factors if f not in names and f not in fixed]
    if missing:
        raise ValueError(f"no bounds or fixed value for {missing}")
    fun, grad, hess = _restricted(poly, names, fixed)
    lo, hi = bounds.lo.astype(float), bounds.hi.astype(float)
    span = hi - lo
    d = len(names)

    axes = [np.linspace(lo[j], hi[j], grid_points) for j in range(d)]
    grid = np.array(list(itertools.product(*axes)))
    base = np.array([float(fixed.get(f, 0.0)) for f in poly.spec.factors])
    full = np.tile(base, (len(grid), 1))
    full[:, [poly.spec.factors.index(n) for n in names]] = grid
    vals = poly.values(full)
    starts = [grid[i] for i in np.argsort(vals, kind="stable")[:n_starts]]

    # scaled coordinates keep L-BFGS-B well conditioned for raw-unit monomials
    sfun = lambda s: fun(lo + s * span)  # noqa: E731
    sgrad = lambda s: grad(lo + s * span) * span  # noqa: E731
    cands = []
    for x0 in starts:
        res = minimize(sfun, (x0 - lo) / span, jac=sgrad, method="L-BFGS-B",
                       bounds=[(0.0, 1.0)] * d, options={"ftol": 1e-15, "gtol": 1e-12})
        u = _polish(lo + np.clip(res.x, 0, 1) * span, lo, hi, fun, grad, hess)
        cands.append((fun(u), tuple(u)))
    best_val = min(c[0] for c in cands)
    tol = 1e-12 * max(1.0, abs(best_val))
    point = np.array(min(c[1] for c in cands if c[0] <= best_val + tol))
    value = fun(point)

    g = grad(point)
    active = []
    free = np.ones(d, dtype=bool)
    inward_ok = True
    for j in range(d):
        if point[j] <= lo[j]:
            active.append(f"{names[j]}@lo")
            free[j] = False
            inward_ok &= g[j] >= -kkt_tol
        elif point[j] >= hi[j]:
            active.append(f"{names[j]}@hi")
            free[j] = False
            inward_ok &= -g[j] >= -kkt_tol
    stationarity = float(np.max(np.abs(g[free]))) if np.any(free) else 0.0
    return Optimum(names=tuple(names), point=point, value=float(value),
                   location="boundary" if active else "interior", stationarity=stationarity,
                   active=tuple(active), kkt_ok=bool(inward_ok and stationarity <= kkt_tol),
                   gradient=g)


# ---------------------------------------------------------------------------
# Persistence


def model_to_json(surface: FittedSurface | Polynomial, bounds: BoxBounds | None = None,
                  normal: Mapping[str, float] | None = None) -> str:
    poly = surface.polynomial if isinstance(surface, FittedSurface) else surface
    doc: dict = {
        "factors": list(poly.spec.factors),
        "terms": [list(t) for t in poly.spec.terms],
        "labels": poly.spec.labels,
        "coefficients": [float(c) for c in poly.coefficients],
    }
    if isinstance(surface, FittedSurface):
        doc["alpha"] = surface.alpha
        doc["r_squared"] = surface.r_squared
        doc["dof_error"] = surface.dof_error
        doc["inference"] = [
            {"term": i.label, "coefficient": i.coefficient, "se": i.se, "t0": i.t0,
             "p_value": i.p_value, "ci_low": i.ci_low, "ci_high": i.ci_high}
            for i in surface.inference]
    if bounds is not None:
        doc["bounds"] = bounds.as_dict()
    if normal:
        doc["normal"] = dict(normal)
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def load_model_json(text: str) -> tuple[Polynomial, BoxBounds | None, dict]:
    doc = json.loads(text)
    spec = ModelSpec(tuple(doc["factors"]), tuple(tuple(int(e) for e in t) for t in doc["terms"]))
    poly = Polynomial(spec, np.array(doc["coefficients"], dtype=float))
    if len(poly.coefficients) != len(spec.terms):
        raise ModelSpecError("coefficient count does not match terms")
    bounds = BoxBounds.from_mapping(doc["bounds"]) if "bounds" in doc else None
    return poly, bounds, doc


def surface_grid_csv(poly: Polynomial, bounds: BoxBounds, fixed: Mapping[str, float] | None = None,
                     n: int = 41) -> str:
    """Grid export over the first two bounded factors."""
    names = bounds.names[:2]
    fun, _, _ = _restricted(poly, bounds.names, fixed or {})
    mids = 0.5 * (bounds.lo + bounds.hi)
    lines = [",".join(list(names) + ["y"])]
    a = np.linspace(bounds.lo[0], bounds.hi[0], n)
    b = np.linspace(bounds.lo[1], bounds.hi[1], n) if len(names) > 1 else [None]
    for u in a:
        for v in b:
            pt = mids.copy()
            pt[0] = u
            if v is not None:
                pt[1] = v
            vals = [repr(float(u))] + ([repr(float(v))] if v is not None else [])
            lines.append(",".join(vals + [repr(fun(pt))]))
    return "\n".join(lines) + "\n"
