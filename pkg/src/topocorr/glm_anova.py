"""General-linear-model ANOVA with sequential and adjusted sums of squares."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .model import AnovaRow, AnovaTable, SSKind, ValidationError
from .numerics import f_sf

FACTORS = ("instrument", "magnification", "area", "day")


@dataclass
class DesignMatrix:
    """Treatment-coded design: intercept then one block of indicators per factor."""

    response: np.ndarray
    X: np.ndarray
    column_names: list
    groups: dict
    factor_order: list
    levels: dict = field(default_factory=dict)


def _level_sort_key(s):
    # numeric-aware so that 5x < 10x < 100x
    try:
        return (0, float(str(s).rstrip("x")), str(s))
    except ValueError:
        return (1, 0.0, str(s))


def encode_design(records=None, factors=None, *, response=None, labels=None) -> DesignMatrix:
    """Build the design from records, or from ``response`` plus a mapping factor -> labels."""
    if factors is None:
        factors = list(labels) if labels is not None else ["instrument", "magnification", "area"]
    factors = [f.lower() for f in factors]
    if records is not None:
        records = list(records)
        y = np.array([r.value for r in records], dtype=float)
        labels = {f: [r.level(f) for r in records] for f in factors}
    else:
        if response is None or labels is None:
            raise ValidationError("pass records or response with labels")
        y = np.asarray(response, dtype=float)
        labels = {f.lower(): [str(v) for v in vals] for f, vals in labels.items()}
    n = len(y)
    cols = [np.ones(n)]
    names = ["intercept"]
    groups, levels = {}, {}
    for f in factors:
        lab = labels[f]
        if len(lab) != n:
            raise ValidationError(f"factor {f} has {len(lab)} labels for {n} responses")
        lv = sorted(set(lab), key=_level_sort_key)
        if len(lv) < 2:
            raise ValidationError(f"factor {f!r} has a single level")
        levels[f] = lv
        idx = []
        for level in lv[1:]:
            idx.append(len(cols))
            cols.append(np.array([1.0 if v == level else 0.0 for v in lab]))
            names.append(f"{f}[{level}]")
        groups[f] = idx
    return DesignMatrix(y, np.column_stack(cols), names, groups, factors, levels)


def _rss_rank(X, y, tol=None):
    if X.shape[1] == 0:
        return float(np.dot(y, y)), 0
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = tol if tol is not None else max(X.shape) * np.finfo(float).eps * (d[0] if len(d) else 0.0) * 1e3
    rank = int(np.sum(d > tol))
    Qr = Q[:, :rank]
    r = y - Qr @ (Qr.T @ y)
    return float(np.dot(r, r)), rank


def _aliased_columns(X, names):
    """Columns that add no rank when appended left to right."""
    out, keep = [], []
    rank = 0
    for j in range(X.shape[1]):
        _, rk = _rss_rank(X[:, keep + [j]], np.zeros(X.shape[0]))
        if rk > rank:
            keep.append(j)
            rank = rk
        else:
            out.append(names[j])
    return keep, out


def _row(name, ss, dof, ms_res, dof_res):
    ms = ss / dof
    if ms_res > 0:
        F = ms / ms_res
        p = f_sf(max(F, 0.0), dof, dof_res)
    elif ss <= 1e-12 * max(1.0, abs(ss)):
        F, p = 0.0, 1.0
    else:
        F, p = float("inf"), 0.0
    return AnovaRow(name, ss, dof, ms, F, p)


def anova(design: DesignMatrix, ss_kind: SSKind | str = SSKind.Adjusted) -> AnovaTable:
    """ANOVA table for the main-effects model.

    Sequential sums of squares add factors in ``factor_order`` and skip
    indicator columns already spanned by earlier ones (reported as aliased).
    Adjusted sums of squares compare the full model with the model lacking
    each factor in turn, which requires a full-rank design.
    """
    ss_kind = SSKind(ss_kind)
    y, X = design.response, design.X
    n = len(y)
    keep, aliased = _aliased_columns(X, design.column_names)
    if aliased and ss_kind is SSKind.Adjusted:
        raise ValidationError("rank-deficient design; aliased columns: " + ", ".join(aliased))
    rss_full, rank_full = _rss_rank(X[:, keep], y)
    dof_res = n - rank_full
    if dof_res < 1:
        raise ValidationError("no residual degrees of freedom")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    # sums of squares at round-off level of the data are zero
    noise = 1e-24 * n * float(np.max(y * y)) if n else 0.0
    const = ss_tot <= noise
    if const or rss_full <= 1e-14 * ss_tot:
        rss_full = 0.0
    ms_res = rss_full / dof_res
    rows = []
    if ss_kind is SSKind.Sequential:
        cols = [0]
        rss_prev, rank_prev = _rss_rank(X[:, cols], y)
        for f in design.factor_order:
            cols = cols + [j for j in design.groups[f] if j in keep]
            rss, rank = _rss_rank(X[:, cols], y)
            dof = rank - rank_prev
            if dof > 0:
                rows.append(_row(f, 0.0 if const else max(rss_prev - rss, 0.0), dof, ms_res, dof_res))
            rss_prev, rank_prev = rss, rank
    else:
        for f in design.factor_order:
            others = [j for j in keep if j not in design.groups[f]]
            rss_red, rank_red = _rss_rank(X[:, others], y)
            ss = 0.0 if const else max(rss_red - rss_full, 0.0)
            rows.append(_row(f, ss, rank_full - rank_red, ms_res, dof_res))
    rows.append(AnovaRow("Residual", rss_full, dof_res, ms_res, None, None))
    r2 = 1.0 - rss_full / ss_tot if not const else 0.0
    return AnovaTable(tuple(rows), ss_kind, r2, tuple(aliased))
