"""Least-squares systematics models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import FitKind, PairedObservation, RegressionFit, ValidationError


def fit_origin(x, y) -> RegressionFit:
    """Straight line through the origin, y = q x.

    R^2 uses the uncentred total sum of squares, the only meaningful choice
    without an intercept.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise ValidationError("need at least 2 paired points")
    sxx = float(np.dot(x, x))
    if sxx == 0:
        raise ValidationError("all regressor values are zero")
    q = float(np.dot(x, y)) / sxx
    r = y - q * x
    n = len(x)
    eps = math.sqrt(float(np.dot(r, r)) / (n - 1))
    syy = float(np.dot(y, y))
    r2 = 1.0 - float(np.dot(r, r)) / syy if syy > 0 else 1.0
    return RegressionFit(FitKind.ThroughOrigin, (q,), (eps / math.sqrt(sxx),), tuple(r), eps, n - 1,
                         r2, tuple(x), 0.0)


def fit_through_origin(pairs) -> RegressionFit:
    pairs = list(pairs)
    if pairs and not isinstance(pairs[0], PairedObservation):
        pairs = [PairedObservation(*p) for p in pairs]
    return fit_origin([p.x_ref for p in pairs], [p.y_opt for p in pairs])


def fit_poly(t, y, order: int) -> RegressionFit:
    """Ordinary least squares polynomial in the centred regressor t - mean(t)."""
    if order not in (1, 2):
        raise ValidationError("order must be 1 or 2")
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(t)
    if len(y) != n or n <= order + 1:
        raise ValidationError(f"need more than {order + 1} points for order {order}")
    if np.ptp(t) == 0:
        raise ValidationError("sequence indices are all equal")
    tc = float(t.mean())
    X = np.vander(t - tc, order + 1, increasing=True)
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) < 1e-12 * np.max(np.abs(np.diag(R))):
        raise ValidationError("collinear sequence design")
    beta = np.linalg.solve(R, Q.T @ y)
    r = y - X @ beta
    dof = n - (order + 1)
    eps = math.sqrt(float(np.dot(r, r)) / dof)
    Rinv = np.linalg.inv(R)
    cov = eps**2 * (Rinv @ Rinv.T)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.dot(r, r)) / sst if sst > 0 else 1.0
    kind = FitKind.Poly1 if order == 1 else FitKind.Poly2
    return RegressionFit(kind, tuple(float(b) for b in beta), tuple(float(s) for s in np.sqrt(np.diag(cov))),
                         tuple(r), eps, dof, r2, tuple(t), tc)


@dataclass(frozen=True)
class Trend:
    intercept: float
    slope: float
    curvature_flag: bool


def residual_trend(fit: RegressionFit, index=None, tol: float = 1e-9) -> Trend:
    """First-order line through residuals versus acquisition index.

    A nonzero slope means the model left a linear tendency. The flag also
    trips when a quadratic term explains the residuals significantly, which
    catches under-fitted curvature that a straight line cannot see.
    """
    r = np.asarray(fit.residuals, dtype=float)
    t = np.asarray(fit.x if index is None else index, dtype=float)
    if len(t) != len(r):
        raise ValidationError("index length differs from residual count")
    X = np.vander(t, 2, increasing=True)
    b, *_ = np.linalg.lstsq(X, r, rcond=None)
    scale = max(float(np.abs(r).max()), 1e-300)
    flag = abs(b[1]) * max(np.ptp(t), 1.0) > tol * scale
    if len(r) > 4 and np.ptp(t) > 0:
        X2 = np.vander(t - t.mean(), 3, increasing=True)
        b2, res2, *_ = np.linalg.lstsq(X2, r, rcond=None)
        fitted = X2 @ b2
        ss_tot = float(np.sum((r - r.mean()) ** 2))
        if ss_tot > 0 and 1.0 - float(np.sum((r - fitted) ** 2)) / ss_tot > 0.5:
            flag = True
    return Trend(float(b[0]), float(b[1]), bool(flag))
