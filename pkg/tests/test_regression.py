import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topocorr.model import FitKind, PairedObservation, ValidationError
from topocorr.regression import fit_origin, fit_poly, fit_through_origin, residual_trend


def test_through_origin_closed_form():
    x = [1.0, 2.0, 3.0, 4.0]
    y = [1.1, 1.9, 3.2, 3.9]
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    q = sxy / sxx
    eps = math.sqrt(sum((b - q * a) ** 2 for a, b in zip(x, y)) / 3)
    f = fit_origin(x, y)
    assert f.coeffs[0] == pytest.approx(q, rel=1e-14)
    assert f.eps_rep == pytest.approx(eps, rel=1e-13)
    assert f.coeff_sd[0] == pytest.approx(eps / math.sqrt(sxx), rel=1e-13)
    assert f.dof == 3


def test_pairs_interface():
    f = fit_through_origin([PairedObservation(1, 2), PairedObservation(2, 4)])
    assert f.coeffs[0] == pytest.approx(2.0)
    assert f.eps_rep == pytest.approx(0.0, abs=1e-15)
    assert fit_through_origin([(1, 2), (2, 4.1)]).kind is FitKind.ThroughOrigin


def test_origin_errors():
    with pytest.raises(ValidationError):
        fit_origin([1.0], [1.0])
    with pytest.raises(ValidationError):
        fit_origin([0.0, 0.0], [1.0, 2.0])


@pytest.mark.parametrize("order", [1, 2])
def test_poly_matches_polyfit_covariance(order):
    rng = np.random.default_rng(3)
    t = np.arange(1.0, 26.0)
    y = 5 + 0.1 * t - 0.01 * t**2 + rng.normal(0, 0.2, len(t))
    f = fit_poly(t, y, order)
    tc = t - t.mean()
    beta, cov = np.polyfit(tc, y, order, cov="unscaled")
    r = y - np.polyval(beta, tc)
    s2 = float(r @ r) / (len(t) - order - 1)
    assert np.allclose(f.coeffs, beta[::-1], rtol=1e-10, atol=1e-12)
    assert np.allclose(f.coeff_sd, np.sqrt(np.diag(cov) * s2)[::-1], rtol=1e-9)
    assert f.eps_rep == pytest.approx(math.sqrt(s2), rel=1e-12)
    assert f.dof == len(t) - order - 1
    assert np.allclose(f.predict(t), np.polyval(beta, tc))


def test_poly_errors():
    with pytest.raises(ValidationError):
        fit_poly([1, 2, 3], [1, 2, 3], 3)
    with pytest.raises(ValidationError):
        fit_poly([1, 2, 3], [1, 2, 3], 2)
    with pytest.raises(ValidationError):
        fit_poly([2, 2, 2, 2], [1, 2, 3, 4], 1)


def test_exact_line_has_zero_residuals():
    t = np.arange(10.0)
    f = fit_poly(t, 3 - 0.5 * t, 1)
    assert f.eps_rep < 1e-12 and f.r2 == pytest.approx(1.0)


def test_height_table_fit(load):
    """A13 step heights in acquisition order, first order."""
    recs = load("table_b1_a13_height.csv")
    f = fit_poly([r.seq for r in recs], [r.value for r in recs], 1)
    assert f.coeffs[0] == pytest.approx(162.84, abs=0.005)
    assert f.coeffs[1] == pytest.approx(-0.058, abs=0.001)
    assert f.dof == 23


@settings(max_examples=60, deadline=None)
@given(q=st.floats(0.5, 2.0), noise=st.lists(st.floats(-0.1, 0.1), min_size=5, max_size=30))
def test_origin_residuals_orthogonal_to_regressor(q, noise):
    x = np.arange(1.0, len(noise) + 1)
    f = fit_origin(x, q * x + np.array(noise))
    assert abs(float(np.dot(f.residuals, x))) < 1e-9 * float(np.dot(x, x))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=30), st.floats(-100, 100))
def test_poly_intercept_shifts_with_response(ys, c):
    t = np.arange(len(ys), dtype=float)
    y = np.array(ys)
    if np.ptp(y) == 0:
        return
    a = fit_poly(t, y, 2)
    b = fit_poly(t, y + c, 2)
    assert b.coeffs[0] - a.coeffs[0] == pytest.approx(c, abs=1e-8)
    assert np.allclose(a.residuals, b.residuals, atol=1e-8)


def test_residual_trend_detects_curvature():
    t = np.arange(1.0, 21.0)
    f = fit_poly(t, (t - 10.5) ** 2, 1)
    assert residual_trend(f).curvature_flag
    rng = np.random.default_rng(0)
    g = fit_poly(t, rng.normal(0, 1, len(t)), 1)
    tr = residual_trend(g)
    assert abs(tr.slope) < 1e-12
