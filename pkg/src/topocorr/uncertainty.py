"""Model equations, combination of variances and expanded uncertainty.

Every budget is built from independent contributors and combined with
``combine``; effective degrees of freedom follow Welch-Satterthwaite and the
coverage factor is the two-sided 95 % Student t quantile.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Distribution,
    FitKind,
    MaterialMeasureCalibration,
    RegressionFit,
    UncertaintyBudget,
    UncertaintyContributor,
    ValidationError,
)
from .numerics import t_quantile
from .regression import fit_origin

COVERAGE_P = 0.975
DEFAULT_RESOLUTION = 0.001


class ModelKind(str, enum.Enum):
    Comparison = "Comparison"
    TimeSequence = "TimeSequence"
    Substitution = "Substitution"
    CharacterizationCorrected = "CharacterizationCorrected"
    CharacterizationUncorrected = "CharacterizationUncorrected"


@dataclass(frozen=True)
class ModelEquation:
    """Bindings of one model equation; ``evaluate`` dispatches on ``kind``."""

    kind: ModelKind
    fits: tuple = ()
    reference: MaterialMeasureCalibration | None = None
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        need = {
            ModelKind.Comparison: 1,
            ModelKind.TimeSequence: 1,
            ModelKind.Substitution: 2,
            ModelKind.CharacterizationCorrected: 0,
            ModelKind.CharacterizationUncorrected: 0,
        }[ModelKind(self.kind)]
        if len(self.fits) < need:
            raise ValidationError(f"{self.kind} needs {need} fit(s)")
        if self.reference is None:
            raise ValidationError(f"{self.kind} needs a reference")


def welch_satterthwaite(contribs) -> float:
    uc2 = sum(c.contribution**2 for c in contribs)
    den = sum(c.contribution**4 / c.dof for c in contribs if math.isfinite(c.dof) and c.contribution > 0)
    if den == 0:
        return math.inf
    return max(1.0, uc2**2 / den)


def coverage_factor(dof_eff: float, p: float = COVERAGE_P) -> float:
    return t_quantile(p, dof_eff)


def combine(contributors, value: float | None = None) -> UncertaintyBudget:
    contribs = tuple(contributors)
    if not contribs:
        raise ValidationError("no contributors")
    uc = math.sqrt(math.fsum(c.contribution**2 for c in contribs))
    if uc == 0:
        raise ValidationError("all contributors are zero; empty budget")
    nu = welch_satterthwaite(contribs)
    k = coverage_factor(nu)
    return UncertaintyBudget(contribs, uc, nu, k, k * uc, value)


def ci_reference_uncertainty(cal: MaterialMeasureCalibration, repeatability: float = 0.0) -> float:
    """Standard uncertainty of a reference averaged over ``n_input`` certificate repeats.

    The certificate U is converted with the t quantile at n_input - 1 dof and
    the spread of the averaged inputs is restored by sqrt(n_input). A larger
    repeatability standard deviation takes precedence over the certificate
    value.
    """
    if cal.n_input < 2:
        raise ValidationError("n_input must be >= 2 to derive the certificate coverage factor")
    k = t_quantile(COVERAGE_P, cal.n_input - 1)
    u_cal = max(cal.U_ref_cal / k, repeatability)
    return u_cal * math.sqrt(cal.n_input)


def _reference_contributor(cal, sensitivity, name="u_CI"):
    return UncertaintyContributor(name, ci_reference_uncertainty(cal), sensitivity, cal.n_input - 1)


def _resolution(resolution):
    return UncertaintyContributor.uniform("resolution", resolution, 1.0)


def comparison_budget(fit: RegressionFit, x_ci: float, reference: MaterialMeasureCalibration,
                      resolution: float = DEFAULT_RESOLUTION) -> UncertaintyBudget:
    """Budget for y = q x_CI with reproducibility and resolution terms."""
    if fit.kind is not FitKind.ThroughOrigin:
        raise ValidationError("comparison model needs a through-origin fit")
    q, sq = fit.coeffs[0], fit.coeff_sd[0]
    contribs = [
        _reference_contributor(reference, q),
        UncertaintyContributor("sigma_q", sq, x_ci, fit.dof),
        UncertaintyContributor("eps_rep", fit.eps_rep, 1.0, fit.dof),
        _resolution(resolution),
    ]
    return combine(contribs, q * x_ci)


def time_sequence_correction(fit: RegressionFit, t, x, x_ci: float) -> np.ndarray:
    """y_i = x_CI + x_i - x_regr(t_i)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if len(t) != len(x) or len(t) != fit.n:
        raise ValidationError("records do not match the fitted series")
    if not np.allclose(t, fit.x):
        raise ValidationError("sequence indices differ from the fit domain")
    return x_ci + x - fit.predict(t)


def time_sequence_budget(fit: RegressionFit, t, x, reference: MaterialMeasureCalibration,
                         subset=None, resolution: float = DEFAULT_RESOLUTION):
    """Corrected values and the budget of their mean over ``subset``.

    Coefficient sensitivities are the sub-group averages of the centred
    regressor powers, i.e. the derivative of the sub-group mean of the
    corrected values.
    """
    if fit.kind not in (FitKind.Poly1, FitKind.Poly2):
        raise ValidationError("time-sequence model needs a polynomial fit")
    y = time_sequence_correction(fit, t, x, reference.x_ref_cal)
    idx = np.arange(len(y)) if subset is None else np.asarray(subset)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if len(idx) == 0:
        raise ValidationError("empty sub-group")
    tc = np.asarray(t, dtype=float)[idx] - fit.t_center
    names = ("sigma_a", "sigma_b", "sigma_c")
    contribs = [_reference_contributor(reference, 1.0)]
    for p, (name, s) in enumerate(zip(names, fit.coeff_sd)):
        contribs.append(UncertaintyContributor(name, s, float(np.mean(tc**p)), fit.dof))
    contribs.append(UncertaintyContributor("eps_rep", fit.eps_rep, 1.0, fit.dof))
    contribs.append(_resolution(resolution))
    return y, combine(contribs, float(np.mean(y[idx])))


def substitution_budget(fit_gauge: RegressionFit, fit_opt: RegressionFit,
                        cal: MaterialMeasureCalibration, t_s: float):
    """Calibration-factor model y = x_ref_cal (p t + e_opt) / (q_g t + e_gauge)."""
    for f in (fit_gauge, fit_opt):
        if f.kind is not FitKind.ThroughOrigin:
            raise ValidationError("substitution model needs first-order through-origin fits")
    if fit_gauge.n != fit_opt.n:
        raise ValidationError("gauge and optical sessions need the same number of repeats")
    qg, p = fit_gauge.coeffs[0], fit_opt.coeffs[0]
    g = qg * t_s
    if g <= 0:
        raise ValidationError("gauge regression value is not positive at t_s")
    o = p * t_s
    xc = cal.x_ref_cal
    y = xc * o / g
    k = cal.k_cal if cal.k_cal is not None else (
        t_quantile(COVERAGE_P, cal.n_input - 1) if cal.n_input > 1 else 2.0)
    dof_cal = cal.n_input - 1 if cal.n_input > 1 else math.inf
    contribs = [
        UncertaintyContributor("u_ref_cal", cal.U_ref_cal / k, o / g, dof_cal),
        UncertaintyContributor("sigma_p_opt", fit_opt.coeff_sd[0], xc / qg, fit_opt.dof),
        UncertaintyContributor("sigma_q_gauge", fit_gauge.coeff_sd[0], -xc * p / qg**2, fit_gauge.dof),
        UncertaintyContributor("eps_rep_opt", fit_opt.eps_rep, xc / g, fit_opt.dof),
        UncertaintyContributor("eps_rep_gauge", fit_gauge.eps_rep, -xc * o / g**2, fit_gauge.dof),
    ]
    if all(c.contribution == 0 for c in contribs):
        raise ValidationError("all contributors are zero")
    return y, combine([c for c in contribs], y)


def corrected_characterization(x_opt, x_ci, cal: MaterialMeasureCalibration, fit: RegressionFit | None = None):
    """y_i = x_i + mean(x_opt) - q x_CI with the slope fitted against the reference mean."""
    x = np.asarray(x_opt, dtype=float)
    ci = np.atleast_1d(np.asarray(x_ci, dtype=float))
    if len(x) < 2:
        raise ValidationError("need at least 2 optical values")
    xci = float(ci.mean())
    if fit is None:
        fit = fit_origin(np.full(len(x), xci), x)
    q = fit.coeffs[0]
    y = x + x.mean() - q * xci
    contribs = [
        UncertaintyContributor("u_CI", ci_reference_uncertainty(cal), q, cal.n_input - 1),
        UncertaintyContributor("u_repea_opt", float(x.std(ddof=1)), 1.0, len(x) - 1),
        UncertaintyContributor("u_slope", fit.coeff_sd[0], xci, fit.dof),
        UncertaintyContributor("u_repr_fit", fit.eps_rep, 1.0, fit.dof),
    ]
    return y, combine(contribs, float(y.mean())), fit


def uncorrected_characterization(x_opt, x_ci, cal: MaterialMeasureCalibration, spread: str = "half-range"):
    """y_i = x_i - (mean(x_opt) - x_CI); the mean offset is treated as uniformly distributed.

    ``spread`` selects the half-width of that uniform distribution: the
    half-range of the optical values (default) or their largest absolute
    deviation from the mean.
    """
    x = np.asarray(x_opt, dtype=float)
    ci = np.atleast_1d(np.asarray(x_ci, dtype=float))
    if len(x) < 2:
        raise ValidationError("need at least 2 optical values")
    xci = float(ci.mean())
    y = x - (x.mean() - xci)
    if spread == "half-range":
        hw = 0.5 * float(np.ptp(x))
    elif spread == "max-abs-deviation":
        hw = float(np.max(np.abs(x - x.mean())))
    else:
        raise ValidationError(f"unknown spread rule {spread!r}")
    contribs = [
        UncertaintyContributor("u_CI", ci_reference_uncertainty(cal), 1.0, cal.n_input - 1),
        UncertaintyContributor("u_repea_opt", float(x.std(ddof=1)), 1.0, len(x) - 1),
    ]
    if len(ci) > 1:
        contribs.append(UncertaintyContributor("u_repea_CI", float(ci.std(ddof=1)), 1.0, len(ci) - 1))
    contribs.append(UncertaintyContributor.uniform("u_repr", hw, 1.0))
    return y, combine(contribs, float(y.mean()))


@dataclass(frozen=True)
class ResidualDiagnostics:
    mean: float
    sd: float
    trend_slope: float
    lag1_autocorr: float
    mean_flag: bool
    serial_flag: bool

    @property
    def flagged(self) -> bool:
        return self.mean_flag or self.serial_flag


def residual_randomization_report(fit: RegressionFit, index=None) -> ResidualDiagnostics:
    """Check that residuals behave as zero-mean random noise.

    Flags a mean beyond two standard errors and a lag-1 autocorrelation beyond
    2/sqrt(n), the latter catching periodic systematics a line cannot absorb.
    """
    r = np.asarray(fit.residuals, dtype=float)
    n = len(r)
    t = np.arange(1, n + 1, dtype=float) if index is None else np.asarray(index, dtype=float)
    order = np.argsort(t, kind="stable")
    r_t, t = r[order], t[order]
    m = float(r.mean())
    sd = float(r.std(ddof=1)) if n > 1 else 0.0
    slope = float(np.polyfit(t, r_t, 1)[0]) if n > 2 and np.ptp(t) > 0 else 0.0
    d = r_t - r_t.mean()
    den = float(np.dot(d, d))
    ac = float(np.dot(d[:-1], d[1:]) / den) if den > 0 and n > 2 else 0.0
    mean_flag = sd > 0 and abs(m) > 2 * sd / math.sqrt(n)
    serial_flag = n > 3 and abs(ac) > 2 / math.sqrt(n)
    return ResidualDiagnostics(m, sd, slope, ac, bool(mean_flag), bool(serial_flag))


def budget_rows(budget: UncertaintyBudget):
    """Contributor rows (name, u, |c|, u_j(y), dof) followed by the summary rows."""
    rows = [(c.name, c.u, abs(c.sensitivity), c.contribution, c.dof) for c in budget.contributors]
    rows += [("u_c", budget.u_combined, None, None, None), ("nu_eff", budget.dof_eff, None, None, None),
             ("k", budget.k, None, None, None), ("U", budget.U, None, None, None)]
    return rows
