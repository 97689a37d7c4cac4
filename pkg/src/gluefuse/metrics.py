"""Evaluation metrics for fused data.

Hellinger distance between probability tables, expected number of
misclassified individuals across imputations, Frechet bounds on the
(B, B') cells, and Rubin's combining rules for multiply-imputed estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import MISSING, ContingencyTable, Dataset, Role
from .errors import ValidationError

SIMPLEX_TOL = 1e-9
_CLAMP = 1e-12


def _as_simplex(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float).ravel()
    if ((p < 0) & (p > -_CLAMP)).any():
        p = np.where(p < 0, 0.0, p)
        p = p / p.sum()
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"{name} sums to {p.sum():.12g}, not 1")
    return p


def hellinger(p, q) -> float:
    """Hellinger distance ``sqrt(sum((sqrt p - sqrt q)^2) / 2)`` in [0, 1]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.size != q.size:
        raise ValidationError(f"length mismatch: {p.size} vs {q.size}")
    p, q = _as_simplex(p, "p"), _as_simplex(q, "q")
    d = math.sqrt(float(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)) / 2.0)
    return min(d, 1.0)


def misclassified_count(truth: ContingencyTable, imputations: Sequence[ContingencyTable]) -> float:
    """Average over imputations of half the L1 distance between count tables."""
    if not imputations:
        raise ValidationError("need at least one imputed table")
    per = []
    for k, tab in enumerate(imputations):
        if tab.variables != truth.variables or tab.shape != truth.shape:
            raise ValidationError(f"imputation {k} has a different table layout than truth")
        if tab.total != truth.total:
            raise ValidationError(
                f"imputation {k} totals {tab.total} individuals, truth has {truth.total}"
            )
        per.append(0.5 * float(np.abs(truth.counts - tab.counts).sum()))
    return float(np.mean(per))


@dataclass(frozen=True)
class FrechetInterval:
    cell: tuple[int, int]
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"cell": list(self.cell), "lower": self.lower, "upper": self.upper, "width": self.width}


@dataclass
class FrechetResult:
    intervals: list[FrechetInterval]
    unmatched_cells: list[tuple] = field(default_factory=list)

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    def __getitem__(self, k):
        return self.intervals[k]

    def interval(self, j: int, k: int) -> FrechetInterval:
        for iv in self.intervals:
            if iv.cell == (j, k):
                return iv
        raise KeyError((j, k))


def _frechet(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.maximum(0.0, p[:, None] + q[None, :] - 1.0)
    hi = np.minimum(p[:, None], q[None, :])
    return lo, hi


def _marginal(codes: np.ndarray, levels: int) -> np.ndarray:
    codes = codes[codes != MISSING]
    if codes.size == 0:
        raise ValidationError("variable has no observed values")
    return np.bincount(codes - 1, minlength=levels) / codes.size


def frechet_bounds(
    d1: Dataset,
    d2: Dataset,
    b_var: str,
    bprime_var: str,
    condition_on_A: bool = True,
) -> FrechetResult:
    """Bounds on ``P(B=j, B'=k)`` implied by the observed margins.

    Unconditionally the bound uses ``P(B)`` from ``d1`` and ``P(B')`` from
    ``d2``. Conditioning on the joint A cell bounds each cell within every
    A cell and averages the bounds with the pooled A-cell masses. A cells
    seen in only one dataset keep their mass with the uninformative
    ``[0, P(.|a)]`` bound and are listed in ``unmatched_cells``.
    """
    schema = d1.schema
    if d2.schema != schema:
        raise ValidationError("datasets must share one schema")
    jb, jbp = schema.index(b_var), schema.index(bprime_var)
    db, dbp = schema.levels[jb], schema.levels[jbp]
    if not condition_on_A:
        lo, hi = _frechet(_marginal(d1.codes[:, jb], db), _marginal(d2.codes[:, jbp], dbp))
        return _collect(lo, hi, [])

    a_idx = schema.indices(schema.names_with_role(Role.A))
    a_levels = tuple(schema.levels[j] for j in a_idx)

    def a_cells(codes):
        sub = codes[:, a_idx]
        ok = (sub != MISSING).all(axis=1)
        return ok, np.ravel_multi_index(tuple((sub[ok] - 1).T), a_levels)

    n_cells = math.prod(a_levels)
    ok1, c1 = a_cells(d1.codes)
    ok2, c2 = a_cells(d2.codes)
    mass = np.bincount(np.concatenate([c1, c2]), minlength=n_cells).astype(float)
    if mass.sum() == 0:
        raise ValidationError("no rows with complete A values")
    mass /= mass.sum()

    def conditional(cells, codes, levels):
        obs = codes != MISSING
        cnt = np.zeros((n_cells, levels))
        np.add.at(cnt, (cells[obs], codes[obs] - 1), 1.0)
        tot = cnt.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return cnt / tot[:, None], tot > 0

    pb, has_b = conditional(c1, d1.codes[ok1, jb], db)
    pbp, has_bp = conditional(c2, d2.codes[ok2, jbp], dbp)
    lo = np.zeros((db, dbp))
    hi = np.zeros((db, dbp))
    unmatched = []
    for a in np.flatnonzero(mass > 0):
        if has_b[a] and has_bp[a]:
            l, h = _frechet(pb[a], pbp[a])
        elif has_b[a]:
            l, h = np.zeros((db, dbp)), np.repeat(pb[a][:, None], dbp, axis=1)
        elif has_bp[a]:
            l, h = np.zeros((db, dbp)), np.repeat(pbp[a][None, :], db, axis=0)
        else:
            l, h = np.zeros((db, dbp)), np.ones((db, dbp))
        if not (has_b[a] and has_bp[a]):
            unmatched.append(tuple(int(x) + 1 for x in np.unravel_index(a, a_levels)))
        lo += mass[a] * l
        hi += mass[a] * h
    return _collect(lo, hi, unmatched)


def _collect(lo, hi, unmatched) -> FrechetResult:
    out = []
    for j in range(lo.shape[0]):
        for k in range(lo.shape[1]):
            l = float(min(max(lo[j, k], 0.0), 1.0))
            h = float(min(max(hi[j, k], l), 1.0))
            out.append(FrechetInterval((j + 1, k + 1), l, h))
    return FrechetResult(out, unmatched)


def t_quantile(prob: float, df: float) -> float:
    """Student-t quantile; ``df = inf`` gives the normal quantile."""
    if math.isinf(df):
        return float(stats.norm.ppf(prob))
    return float(stats.t.ppf(prob, df))


@dataclass(frozen=True)
class MIEstimate:
    estimates: tuple[float, ...]
    variances: tuple[float, ...]
    qbar: float
    within: float
    between: float
    total: float
    df: float
    lower: float
    upper: float

    @property
    def m(self) -> int:
        return len(self.estimates)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "qbar": self.qbar,
            "within": self.within,
            "between": self.between,
            "total": self.total,
            "df": None if math.isinf(self.df) else self.df,
            "lower": self.lower,
            "upper": self.upper,
        }


def mi_combine(estimates: Sequence[tuple[float, float]], level: float = 0.95) -> MIEstimate:
    """Rubin's rules over ``(estimate, variance)`` pairs from m completed datasets."""
    if len(estimates) < 2:
        raise ValidationError("multiple imputation needs at least m = 2 estimates")
    q = np.array([e[0] for e in estimates], dtype=float)
    u = np.array([e[1] for e in estimates], dtype=float)
    if (u < 0).any():
        raise ValidationError("variances must be non-negative")
    m = q.size
    qbar = float(q.mean())
    W = float(u.mean())
    B = float(q.var(ddof=1))
    T = W + (1.0 + 1.0 / m) * B
    if B > 0:
        r = (1.0 + 1.0 / m) * B
        df = (m - 1) * (1.0 + W / r) ** 2
    else:
        df = math.inf
    half = t_quantile(0.5 + level / 2, df) * math.sqrt(T)
    return MIEstimate(tuple(q), tuple(u), qbar, W, B, T, df, qbar - half, qbar + half)
