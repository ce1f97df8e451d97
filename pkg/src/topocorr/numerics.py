"""Distribution functions and quantiles.

Thin wrappers over ``scipy.special`` kernels (normal integral, regularized
incomplete beta and gamma). The Student t quantile is obtained by bracketed
root-finding on the CDF so that non-integer degrees of freedom are handled
with the same accuracy everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ToleranceConfig:
    abs_tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise DomainError("abs_tol must be > 0")


DEFAULT_TOL = ToleranceConfig()


def _check_p(p):
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must be in (0, 1), got {p}")


def normal_cdf(z: float) -> float:
    if math.isnan(z):
        raise DomainError("z is NaN")
    return float(special.ndtr(z))


def normal_quantile(p: float) -> float:
    _check_p(p)
    return float(special.ndtri(p))


def t_cdf(t: float, dof: float) -> float:
    if not dof > 0:
        raise DomainError(f"dof must be positive, got {dof}")
    if math.isinf(dof):
        return normal_cdf(t)
    # P(T <= t) through the regularized incomplete beta
    x = dof / (dof + t * t)
    tail = 0.5 * float(special.betainc(0.5 * dof, 0.5, x))
    return 1.0 - tail if t > 0 else tail


def t_quantile(p: float, dof: float, tol: ToleranceConfig = DEFAULT_TOL) -> float:
    """Quantile of Student's t with real-valued ``dof``."""
    _check_p(p)
    if not (dof > 0) or math.isnan(dof):
        raise DomainError(f"dof must be positive, got {dof}")
    if math.isinf(dof) or dof > 1e7:
        # t_cdf loses resolution in the incomplete beta far out; the normal
        # limit is closer than 1e-7 there
        return normal_quantile(p)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, dof, tol)
    lo = normal_quantile(p)
    hi = max(2.0 * lo, 1.0)
    while t_cdf(hi, dof) < p:
        hi *= 2.0
    # Brent to an x-tolerance far below the CDF tolerance
    return optimize.brentq(lambda t: t_cdf(t, dof) - p, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                           maxiter=tol.max_iter)


def f_sf(F: float, dof1: float, dof2: float) -> float:
    if F < 0:
        raise DomainError("F must be >= 0")
    if dof1 < 1 or dof2 < 1:
        raise DomainError("dofs must be >= 1")
    if F == 0:
        return 1.0
    return float(special.betainc(0.5 * dof2, 0.5 * dof1, dof2 / (dof2 + dof1 * F)))


def chi2_sf(x: float, dof: float) -> float:
    if x < 0:
        raise DomainError("x must be >= 0")
    if dof < 1:
        raise DomainError("dof must be >= 1")
    if x == 0:
        return 1.0
    return float(special.gammaincc(0.5 * dof, 0.5 * x))
