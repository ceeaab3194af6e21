"""ANOVA, assumption checks and the two-sample mean test.

Distribution functions are evaluated through the regularized incomplete
beta function (``scipy.special``); every test statistic is computed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import special

if TYPE_CHECKING:
    from gentune.doe import DesignMatrix

__all__ = [
    "AnovaRow",
    "AnovaTable",
    "IndependenceResult",
    "LeveneResult",
    "ShapiroResult",
    "StatsError",
    "TTestResult",
    "TransformResult",
    "anova_residuals",
    "anova_selected",
    "anova_table",
    "dist_cdf",
    "dist_ppf",
    "dist_sf",
    "independence_check",
    "levene",
    "power_transform",
    "search_lambda",
    "shapiro_wilk",
    "two_sample_t",
]


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Distributions


def _check_params(kind: str, params: Sequence[float]) -> tuple[float, ...]:
    params = tuple(float(p) for p in params)
    need = {"normal": 0, "t": 1, "f": 2}
    if kind not in need:
        raise StatsError(f"unknown distribution {kind!r}")
    if len(params) != need[kind] or any(not p > 0 for p in params):
        raise StatsError(f"invalid parameters {params} for {kind}")
    return params


def dist_cdf(kind: str, params: Sequence[float], x):
    """Lower-tail probability of the standard normal, Student t or F law."""
    params = _check_params(kind, params)
    x = np.asarray(x, dtype=float)
    if kind == "normal":
        out = special.ndtr(x)
    elif kind == "t":
        (nu,) = params
        tail = 0.5 * special.betainc(0.5 * nu, 0.5, nu / (nu + x * x))
        out = np.where(x > 0, 1.0 - tail, tail)
    else:
        d1, d2 = params
        xp = np.maximum(x, 0.0)
        out = special.betainc(0.5 * d1, 0.5 * d2, d1 * xp / (d1 * xp + d2))
        out = np.where(np.isposinf(x), 1.0, out)
    return float(out) if out.ndim == 0 else out


def dist_sf(kind: str, params: Sequence[float], x):
    """Upper-tail probability, computed directly to keep small P values exact."""
    params = _check_params(kind, params)
    x = np.asarray(x, dtype=float)
    if kind == "normal":
        out = special.ndtr(-x)
    elif kind == "t":
        (nu,) = params
        tail = 0.5 * special.betainc(0.5 * nu, 0.5, nu / (nu + x * x))
        out = np.where(x > 0, tail, 1.0 - tail)
    else:
        d1, d2 = params
        xp = np.maximum(x, 0.0)
        out = special.betainc(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * xp))
        out = np.where(np.isposinf(x), 0.0, out)
    return float(out) if out.ndim == 0 else out


def dist_ppf(kind: str, params: Sequence[float], q):
    params = _check_params(kind, params)
    q = np.asarray(q, dtype=float)
    if kind == "normal":
        out = special.ndtri(q)
    elif kind == "t":
        out = special.stdtrit(params[0], q)
    else:
        out = special.fdtri(params[0], params[1], q)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# ANOVA


@dataclass(frozen=True)
class AnovaRow:
    source: str
    ss: float
    dof: int
    ms: float
    f: float | None = None
    p: float | None = None


@dataclass(frozen=True)
class AnovaTable:
    rows: list[AnovaRow]
    error: AnovaRow
    total: AnovaRow
    alpha: float = 0.05

    def significant(self) -> list[str]:
        return [r.source for r in self.rows if r.p is not None and r.p < self.alpha]

    def to_csv(self) -> str:
        lines = ["SoV,SS,DoF,MS,Fo,P-Value"]
        for r in self.rows + [self.error, self.total]:
            cells = [r.source, repr(r.ss), str(r.dof), "" if r is self.total else repr(r.ms),
                     "" if r.f is None else repr(r.f), "" if r.p is None else repr(r.p)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self, title: str = "") -> str:
        head = ("SoV", "SS", "DoF", "MS", "Fo", "P-Value")
        body = []
        for r in self.rows + [self.error, self.total]:
            body.append((r.source, f"{r.ss:.6g}", str(r.dof),
                         "" if r is self.total else f"{r.ms:.6g}",
                         "" if r.f is None else f"{r.f:.4f}",
                         "" if r.p is None else f"{r.p:.4g}"))
        widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        out = [title] if title else []
        out += [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
        return "\n".join(out) + "\n"


def _f_test(ms: float, ms_error: float, dof: int, dof_error: int) -> tuple[float, float]:
    if ms == 0.0 or dof == 0:
        return 0.0, 1.0
    if ms_error == 0.0:
        return math.inf, 0.0
    f = ms / ms_error
    return f, float(dist_sf("f", (dof, dof_error), f))


def anova_table(sources: Sequence[tuple[str, float, int]], error_ss: float, error_dof: int,
                alpha: float = 0.05) -> AnovaTable:
    """Fixed-effects table from (label, SS, DoF) rows and the error term.

    Degenerate F ratios follow one convention everywhere: a zero mean square
    gives F = 0, P = 1; a zero error mean square with a nonzero source gives
    F = inf, P = 0.
    """
    if error_dof <= 0:
        raise StatsError("error term needs at least one degree of freedom")
    ms_e = error_ss / error_dof
    rows = []
    for label, ss, dof in sources:
        ms = ss / dof if dof else 0.0
        f, p = _f_test(ms, ms_e, dof, error_dof)
        rows.append(AnovaRow(label, float(ss), int(dof), ms, f, p))
    total_ss = sum(r.ss for r in rows) + error_ss
    total_dof = sum(r.dof for r in rows) + error_dof
    return AnovaTable(rows=rows, error=AnovaRow("Error", float(error_ss), int(error_dof), ms_e),
                      total=AnovaRow("Total", float(total_ss), int(total_dof),
                                     total_ss / total_dof),
                      alpha=alpha)


def _validate_selection(design: DesignMatrix, selected: Sequence[str]) -> list[str]:
    from gentune.doe import effect_labels

    selected = [s for s in selected]
    if not selected:
        raise StatsError("empty effect selection")
    valid = set(effect_labels(design.letters))
    canon = {"".join(sorted(l, key=design.letters.index)): l for l in valid}
    out = []
    for s in selected:
        if any(ch not in design.letters for ch in s) or len(set(s)) != len(s):
            raise StatsError(f"unknown effect {s!r}")
        key = "".join(sorted(s, key=design.letters.index))
        if key not in canon:
            raise StatsError(f"unknown effect {s!r}")
        if key in out:
            raise StatsError(f"effect {s!r} selected twice")
        out.append(key)
    if len(out) >= len(design.runs) - 1:
        raise StatsError("selection leaves no degrees of freedom for error")
    return out


def anova_selected(design: DesignMatrix, responses, selected: Sequence[str],
                   alpha: float = 0.05) -> AnovaTable:
    """Multifactor ANOVA of an unreplicated 2^k design.

    Each selected effect contributes its contrast SS with one DoF; every
    other effect is pooled into the error term.
    """
    y = np.asarray(responses, dtype=float)
    if y.shape != (len(design.runs),):
        raise StatsError("responses length must equal the number of runs")
    labels = _validate_selection(design, selected)
    n = len(y)
    total_ss = float(np.sum((y - y.mean()) ** 2))
    rows = []
    for label in labels:
        contrast = float(design.sign_column(label) @ y)
        rows.append((label, contrast**2 / n, 1))
    model_ss = sum(r[1] for r in rows)
    error_ss = max(total_ss - model_ss, 0.0)
    return anova_table(rows, error_ss, n - 1 - len(rows), alpha)


def anova_residuals(design: DesignMatrix, responses, selected: Sequence[str]) -> np.ndarray:
    """Residuals of the fixed-effects model built from the selected effects."""
    y = np.asarray(responses, dtype=float)
    labels = _validate_selection(design, selected)
    fitted = np.full_like(y, y.mean())
    for label in labels:
        col = design.sign_column(label)
        fitted += col * (col @ y) / len(y)
    return y - fitted


# ---------------------------------------------------------------------------
# Levene / power transformation


@dataclass(frozen=True)
class LeveneResult:
    statistic: float
    p_value: float
    groups: int
    center: str


def levene(groups: Sequence[Sequence[float]], center: str = "mean") -> LeveneResult:
    """Levene's test: one-way ANOVA on absolute deviations from the group
    center (``"mean"``, classic; ``"median"``, Brown-Forsythe)."""
    if center not in ("mean", "median"):
        raise StatsError("center must be 'mean' or 'median'")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2:
        raise StatsError("Levene's test needs at least two groups")
    if any(len(a) < 2 for a in arrays):
        raise StatsError("every group needs at least two observations")
    fn = np.mean if center == "mean" else np.median
    devs = [np.abs(a - fn(a)) for a in arrays]
    n = sum(len(d) for d in devs)
    k = len(devs)
    grand = np.concatenate(devs).mean()
    between = sum(len(d) * (d.mean() - grand) ** 2 for d in devs)
    within = sum(np.sum((d - d.mean()) ** 2) for d in devs)
    f, p = _f_test(between / (k - 1), within / (n - k), k - 1, n - k)
    # Rounding noise in ``between`` must not masquerade as a difference
    # when every group has the same deviation pattern.
    if between <= 1e-14 * max(within, np.sum(np.concatenate(devs) ** 2), 1e-300):
        f, p = 0.0, 1.0
    return LeveneResult(float(f), float(p), k, center)


def power_transform(data, lam: float) -> np.ndarray:
    """``y**lam`` elementwise (natural log at ``lam == 0``)."""
    y = np.asarray(data, dtype=float)
    if np.any(y <= 0):
        raise StatsError("power transformation requires positive data")
    if lam == 0:
        return np.log(y)
    return y**lam


@dataclass(frozen=True)
class TransformResult:
    lam: float
    grid: np.ndarray
    criterion: np.ndarray  # worst-case Levene statistic per grid point


def default_lambda_grid() -> np.ndarray:
    return np.round(np.arange(-60, 61) * 0.05, 10)


def search_lambda(data, groupings: Sequence[Sequence], grid=None,
                  center: str = "mean") -> TransformResult:
    """Exponent minimizing the largest Levene statistic over several factors.

    ``groupings`` holds one label array per factor (e.g. the coded column of
    that factor); each defines a partition of ``data`` into groups.
    """
    y = np.asarray(data, dtype=float)
    if np.any(y <= 0):
        raise StatsError("power transformation requires positive data")
    grid = default_lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    parts = []
    for labels in groupings:
        labels = np.asarray(labels)
        parts.append([np.flatnonzero(labels == v) for v in np.unique(labels)])
    crit = np.empty(len(grid))
    for i, lam in enumerate(grid):
        t = power_transform(y, lam)
        crit[i] = max(levene([t[ix] for ix in groups], center).statistic for groups in parts)
    best = int(np.argmin(crit))
    return TransformResult(float(grid[best]), grid, crit)


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston 1995, algorithm AS R94)


@dataclass(frozen=True)
class ShapiroResult:
    w: float
    p_value: float
    n: int


def _poly(coeffs: Sequence[float], x: float) -> float:
    return sum(c * x**i for i, c in enumerate(coeffs))


_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _shapiro_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights a_1..a_n (a_i < 0 for the lower half)."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    i = np.arange(1, n + 1)
    m = special.ndtri((i - 0.375) / (n + 0.25))
    summ2 = float(m @ m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
        a = m / fac
        a[0], a[1] = -a1, -a2
        a[-1], a[-2] = a1, a2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1**2))
        a = m / fac
        a[0], a[-1] = -a1, a1
    return a


def shapiro_wilk(sample) -> ShapiroResult:
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if not 3 <= n <= 5000:
        raise StatsError("Shapiro-Wilk needs 3 <= n <= 5000")
    ssq = float(np.sum((x - x.mean()) ** 2))
    if ssq <= 1e-19 * max(1.0, float(np.max(np.abs(x)))) ** 2:
        raise StatsError("zero variance sample")
    a = _shapiro_coefficients(n)
    w = min(float((a @ x) ** 2 / ssq), 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return ShapiroResult(w, float(min(max(p, 0.0), 1.0)), n)
    w1 = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return ShapiroResult(w, 1e-99, n)
        y = -math.log(gamma - w1)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        xx = math.log(n)
        y = w1
        mean = _poly(_C5, xx)
        sd = math.exp(_poly(_C6, xx))
    if not math.isfinite(y):
        return ShapiroResult(w, 1.0, n)
    return ShapiroResult(w, float(dist_sf("normal", (), (y - mean) / sd)), n)


# ---------------------------------------------------------------------------
# Independence


@dataclass(frozen=True)
class IndependenceResult:
    durbin_watson: float
    dw_p: float
    runs: int
    runs_z: float
    runs_p: float
    alpha: float
    verdict: str  # "not rejected" | "rejected"


def independence_check(residuals, run_order=None, alpha: float = 0.05) -> IndependenceResult:
    """Durbin-Watson statistic plus a Wald-Wolfowitz runs test about zero.

    ``run_order[i]`` is the execution position of observation ``i``; the
    residuals are analysed in execution order. The DW p-value uses the
    large-sample law DW ~ N(2, 4/n). Independence is "not rejected" only
    when both tests pass at ``alpha``.
    """
    e = np.asarray(residuals, dtype=float)
    n = len(e)
    if n < 8:
        raise StatsError("independence check needs n >= 8")
    if run_order is not None:
        e = e[np.argsort(np.asarray(run_order), kind="stable")]
    ss = float(e @ e)
    if ss == 0.0:
        raise StatsError("all residuals are zero")
    dw = float(np.sum(np.diff(e) ** 2) / ss)
    dw_p = float(2.0 * dist_sf("normal", (), abs(dw - 2.0) / (2.0 / math.sqrt(n))))

    signs = np.sign(e[e != 0.0])
    n_pos, n_neg = int(np.sum(signs > 0)), int(np.sum(signs < 0))
    if n_pos == 0 or n_neg == 0:
        raise StatsError("runs test is degenerate: residuals never change sign")
    runs = 1 + int(np.sum(signs[1:] != signs[:-1]))
    tot = n_pos + n_neg
    mu = 2.0 * n_pos * n_neg / tot + 1.0
    var = (mu - 1.0) * (mu - 2.0) / (tot - 1.0)
    z = (runs - mu) / math.sqrt(var) if var > 0 else 0.0
    runs_p = float(2.0 * dist_sf("normal", (), abs(z)))
    verdict = "not rejected" if dw_p >= alpha and runs_p >= alpha else "rejected"
    return IndependenceResult(dw, dw_p, runs, z, runs_p, alpha, verdict)


# ---------------------------------------------------------------------------
# Two-sample t


@dataclass(frozen=True)
class TTestResult:
    t0: float
    dof: int
    p_one_sided: float
    p_two_sided: float
    alpha: float
    alternative: str
    decision: str  # "H0 rejected" | "H0 not rejected"
    mean_a: float = 0.0
    mean_b: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def rejected(self) -> bool:
        return self.decision == "H0 rejected"


def two_sample_t(a, b, alpha: float = 0.05, alternative: str = "greater") -> TTestResult:
    """Pooled-variance t test for ``mean(a) - mean(b)``.

    ``alternative`` picks the one-sided P that drives the decision:
    ``"greater"`` tests mean(a) > mean(b), ``"less"`` the reverse, and
    ``"two-sided"`` uses the two-sided P.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise StatsError("each sample needs at least two observations")
    if alternative not in ("greater", "less", "two-sided"):
        raise StatsError(f"unknown alternative {alternative!r}")
    na, nb = len(a), len(b)
    dof = na + nb - 2
    sp2 = (np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)) / dof
    diff = float(a.mean() - b.mean())
    if sp2 <= 0.0:
        if diff == 0.0:
            t0 = 0.0
        else:
            raise StatsError("pooled variance is zero")
    else:
        t0 = diff / math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    p_two = float(min(1.0, 2.0 * dist_sf("t", (dof,), abs(t0))))
    p_greater = float(dist_sf("t", (dof,), t0))
    p_one = p_greater if alternative != "less" else float(dist_cdf("t", (dof,), t0))
    p_dec = p_two if alternative == "two-sided" else p_one
    decision = "H0 rejected" if p_dec < alpha else "H0 not rejected"
    return TTestResult(float(t0), dof, p_one, p_two, alpha, alternative, decision,
                       float(a.mean()), float(b.mean()))
