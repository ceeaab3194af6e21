"""Full factorial designs, effect estimation and normal-plot screening."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gentune.stats import dist_ppf

__all__ = [
    "DesignMatrix",
    "EffectEstimate",
    "Factor",
    "ScreeningResult",
    "effect_labels",
    "estimate_effects",
    "full_factorial_2k",
    "full_factorial_3k",
    "lenth_flag",
    "normal_plot_data",
]


@dataclass(frozen=True)
class Factor:
    letter: str
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"factor {self.letter}: low must be < high")

    @property
    def mid(self) -> float:
        return 0.5 * (self.low + self.high)

    def decode(self, coded):
        """Coded level(s) in [-1, 1] to physical units."""
        coded = np.asarray(coded, dtype=float)
        out = np.where(coded < 0, self.low, np.where(coded > 0, self.high, self.mid))
        exact = np.isin(coded, (-1.0, 0.0, 1.0))
        linear = self.mid + 0.5 * (self.high - self.low) * coded
        out = np.where(exact, out, linear)
        return float(out) if out.ndim == 0 else out

    def encode(self, value):
        value = np.asarray(value, dtype=float)
        out = np.where(value == self.low, -1.0, np.where(value == self.high, 1.0,
                       np.where(value == self.mid, 0.0,
                                (value - self.mid) / (0.5 * (self.high - self.low)))))
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DesignMatrix:
    factors: tuple[Factor, ...]
    runs: np.ndarray  # coded, shape (n_runs, k)
    levels: int  # 2 or 3
    run_order: tuple[int, ...] = ()

    @property
    def run_ids(self) -> list[int]:
        return list(range(1, len(self.runs) + 1))

    @property
    def letters(self) -> list[str]:
        return [f.letter for f in self.factors]

    def physical(self) -> np.ndarray:
        return np.column_stack([f.decode(self.runs[:, j]) for j, f in enumerate(self.factors)])

    def assignment(self, row: int) -> dict[str, float]:
        """Parameter name -> physical value for one run."""
        phys = self.physical()[row]
        return {f.name: float(v) for f, v in zip(self.factors, phys)}

    def sign_column(self, label: str) -> np.ndarray:
        cols = {f.letter: j for j, f in enumerate(self.factors)}
        out = np.ones(len(self.runs))
        for ch in label:
            out = out * self.runs[:, cols[ch]]
        return out

    def randomized(self, seed: int) -> DesignMatrix:
        """Same design with a seeded random execution order recorded."""
        order = np.random.default_rng(seed).permutation(len(self.runs)) + 1
        return DesignMatrix(self.factors, self.runs, self.levels, tuple(int(i) for i in order))

    def to_csv(self) -> str:
        head = ["run_id"] + self.letters + [f.name for f in self.factors]
        if self.run_order:
            head.append("run_order")
        phys = self.physical()
        lines = [",".join(head)]
        for i, rid in enumerate(self.run_ids):
            row = [str(rid)] + [str(int(c)) for c in self.runs[i]] + [repr(float(p)) for p in phys[i]]
            if self.run_order:
                row.append(str(self.run_order[i]))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _check_letters(factors: Sequence[Factor]) -> None:
    letters = [f.letter for f in factors]
    if len(set(letters)) != len(letters):
        raise ValueError(f"duplicate factor letters in {letters}")


def full_factorial_2k(factors: Sequence[Factor]) -> DesignMatrix:
    """2^k design in standard (Yates) order, first factor alternating fastest."""
    k = len(factors)
    if not 1 <= k <= 20:
        raise ValueError("2^k designs support 1 <= k <= 20")
    _check_letters(factors)
    idx = np.arange(2**k)[:, None]
    runs = np.where((idx >> np.arange(k)) & 1, 1.0, -1.0)
    return DesignMatrix(tuple(factors), runs, 2)


def full_factorial_3k(factors: Sequence[Factor]) -> DesignMatrix:
    """3^k design over {-1, 0, +1}, first factor cycling fastest."""
    k = len(factors)
    if not 1 <= k <= 12:
        raise ValueError("3^k designs support 1 <= k <= 12")
    _check_letters(factors)
    rows = [tuple(reversed(r)) for r in itertools.product((-1.0, 0.0, 1.0), repeat=k)]
    return DesignMatrix(tuple(factors), np.array(rows), 3)


def effect_labels(letters: Sequence[str]) -> list[str]:
    """All interaction labels in Yates order: A, B, AB, C, AC, BC, ABC, ..."""
    out = []
    for mask in range(1, 2 ** len(letters)):
        out.append("".join(l for j, l in enumerate(letters) if mask >> j & 1))
    return out


@dataclass(frozen=True)
class EffectEstimate:
    label: str
    effect: float
    contrast: float
    ss: float


def estimate_effects(design: DesignMatrix, responses) -> list[EffectEstimate]:
    """All 2^k - 1 effects of an unreplicated 2^k design, Yates order."""
    if design.levels != 2:
        raise ValueError("effects are defined for 2-level designs")
    y = np.asarray(responses, dtype=float)
    n = len(design.runs)
    if y.shape != (n,):
        raise ValueError(f"expected {n} responses, got {y.shape}")
    # sign columns sum to zero, so centering leaves contrasts unchanged and
    # keeps them free of cancellation error
    yc = y - y.mean()
    out = []
    for label in effect_labels(design.letters):
        contrast = float(design.sign_column(label) @ yc)
        out.append(EffectEstimate(label, 2.0 * contrast / n, contrast, contrast**2 / n))
    return out


def normal_plot_data(effects: Sequence[EffectEstimate] | Sequence[float]):
    """Sorted effects paired with normal quantiles at ``(i - 0.5)/m``.

    Returns ``(labels, effects, quantiles)``; labels are ``None`` when bare
    numbers were given.
    """
    values = [e.effect if isinstance(e, EffectEstimate) else float(e) for e in effects]
    labels = [e.label if isinstance(e, EffectEstimate) else None for e in effects]
    m = len(values)
    if m < 2:
        raise ValueError("need at least two effects")
    order = sorted(range(m), key=lambda i: (values[i], str(labels[i])))
    q = dist_ppf("normal", (), (np.arange(1, m + 1) - 0.5) / m)
    # Φ⁻¹ is evaluated independently per rank; symmetrize the rounding so the
    # plotting positions are exactly antisymmetric.
    q = 0.5 * (q - q[::-1])
    return [labels[i] for i in order], np.array([values[i] for i in order]), q


@dataclass(frozen=True)
class ScreeningResult:
    labels: list[str]
    effects: np.ndarray  # ascending
    quantiles: np.ndarray
    lenth_pse: float
    margin: float
    flagged: list[str]
    alpha: float
    method: str = "sme"
    abs_effects: dict[str, float] = field(default_factory=dict)


def lenth_pse(values: np.ndarray) -> float:
    a = np.abs(np.asarray(values, dtype=float))
    s0 = 1.5 * np.median(a)
    trimmed = a[a < 2.5 * s0]
    return float(1.5 * np.median(trimmed)) if trimmed.size else 0.0


def lenth_flag(effects: Sequence[EffectEstimate] | Sequence[float], alpha: float = 0.05,
               method: str = "sme") -> ScreeningResult:
    """Flag active effects with Lenth's pseudo standard error.

    ``method="me"`` uses the individual margin of error
    ``t(1 - alpha/2, m/3) * PSE``; ``"sme"`` (default) uses the simultaneous
    margin with ``gamma = (1 + (1 - alpha)**(1/m)) / 2``, which controls the
    chance of flagging any inert effect at about ``alpha``.
    """
    labels, values, quantiles = normal_plot_data(effects)
    m = len(values)
    if m < 7:
        raise ValueError("Lenth's method needs at least 7 effects")
    if method == "me":
        gamma = 1.0 - alpha / 2.0
    elif method == "sme":
        gamma = 0.5 * (1.0 + (1.0 - alpha) ** (1.0 / m))
    else:
        raise ValueError(f"unknown margin method {method!r}")
    pse = lenth_pse(values)
    margin = float(dist_ppf("t", (m / 3.0,), gamma)) * pse
    names = [l if l is not None else str(i) for i, l in enumerate(labels)]
    flagged = [n for n, v in zip(names, values) if abs(v) > margin]
    flagged.sort(key=lambda s: (len(s), s))
    return ScreeningResult(labels=names, effects=values, quantiles=quantiles, lenth_pse=pse,
                           margin=margin, flagged=flagged, alpha=alpha, method=method,
                           abs_effects={n: abs(float(v)) for n, v in zip(names, values)})


def effects_csv(effects: Sequence[EffectEstimate]) -> str:
    lines = ["label,effect,ss"] + [f"{e.label},{e.effect!r},{e.ss!r}" for e in effects]
    return "\n".join(lines) + "\n"


def normal_plot_csv(result: ScreeningResult) -> str:
    lines = ["rank,label,effect,quantile"]
    for i, (l, e, q) in enumerate(zip(result.labels, result.effects, result.quantiles), 1):
        lines.append(f"{i},{l},{float(e)!r},{float(q)!r}")
    return "\n".join(lines) + "\n"
