import math

import pytest
from hypothesis import given, settings, strategies as st

from topocorr.numerics import (
    DomainError,
    ToleranceConfig,
    chi2_sf,
    f_sf,
    normal_cdf,
    normal_quantile,
    t_cdf,
    t_quantile,
)

# frozen from mpmath at 40 digits
T_QUANTILES = [
    (0.975, 11, 2.2009851600916394),
    (0.975, 1, 12.706204736174693),
    (0.975, 2.5, 3.5746548420036818),
    (0.975, 40, 2.021075390306273),
    (0.975, 23, 2.0686576104190482),
    (0.95, 7.3, 1.882930017956431),
    (0.995, 3, 5.8409093097333554),
    (0.975, 1000, 1.9623390808264081),
]


@pytest.mark.parametrize("p,dof,expected", T_QUANTILES)
def test_t_quantile_matches_mpmath(p, dof, expected):
    assert t_quantile(p, dof) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("t,dof,expected", [
    (1.5, 4, 0.896),
    (-2.0, 9.5, 0.037443178873994708),
    (0.3, 1, 0.59277357907774234),
])
def test_t_cdf_matches_mpmath(t, dof, expected):
    assert t_cdf(t, dof) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("F,d1,d2,expected", [
    (2.0, 2, 26, 0.15562422879201621),
    (29.55, 4, 26, 2.4811665504927919e-9),
    (0.5, 5, 10, 0.77002488065010163),
])
def test_f_sf_matches_mpmath(F, d1, d2, expected):
    assert f_sf(F, d1, d2) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("x,dof,expected", [
    (3.0, 2, 0.22313016014842983),
    (10.0, 7, 0.18857346751345007),
    (0.5, 1, 0.47950012218695346),
])
def test_chi2_sf_matches_mpmath(x, dof, expected):
    assert chi2_sf(x, dof) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("p,expected", [
    (0.975, 1.9599639845400539),
    (0.5 + 1e-9, 2.5066282037387114e-9),
    (1 - 1 / (4 * 41), 2.5064473464808861),
    (1e-12, -7.0344838253011319),
])
def test_normal_quantile_matches_mpmath(p, expected):
    assert normal_quantile(p) == pytest.approx(expected, rel=1e-7)


def test_coverage_factor_for_eleven_dof():
    assert abs(t_quantile(0.975, 11) - 2.2010) <= 5e-4


def test_infinite_dof_is_normal():
    assert t_quantile(0.975, math.inf) == pytest.approx(1.959963984540054, rel=1e-14)
    assert t_cdf(1.0, math.inf) == pytest.approx(normal_cdf(1.0))


def test_domain_errors():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            t_quantile(p, 5)
        with pytest.raises(DomainError):
            normal_quantile(p)
    with pytest.raises(DomainError):
        t_quantile(0.9, 0)
    with pytest.raises(DomainError):
        t_quantile(0.9, float("nan"))
    with pytest.raises(DomainError):
        f_sf(-1, 2, 3)
    with pytest.raises(DomainError):
        chi2_sf(-1, 2)
    with pytest.raises(DomainError):
        ToleranceConfig(abs_tol=0)


def test_zero_statistics_have_unit_tail():
    assert f_sf(0, 3, 7) == 1.0
    assert chi2_sf(0, 3) == 1.0


@settings(max_examples=200, deadline=None)
@given(p=st.floats(1e-6, 1 - 1e-6), dof=st.floats(1.0, 1e4))
def test_t_quantile_inverts_cdf(p, dof):
    assert abs(t_cdf(t_quantile(p, dof), dof) - p) <= 1e-8


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0.5, 1 - 1e-6), d1=st.floats(1.0, 200), d2=st.floats(1.0, 200))
def test_t_quantile_decreases_with_dof(p, d1, d2):
    lo, hi = sorted((d1, d2))
    assert t_quantile(p, lo) >= t_quantile(p, hi) - 1e-9


@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-6, 1 - 1e-6), dof=st.floats(1.0, 500))
def test_t_quantile_is_odd(p, dof):
    assert t_quantile(p, dof) == pytest.approx(-t_quantile(1 - p, dof), rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-10, 1 - 1e-10))
def test_normal_quantile_inverts_cdf(p):
    assert abs(normal_cdf(normal_quantile(p)) - p) <= 1e-8 * max(p, 1e-2)


@settings(max_examples=100, deadline=None)
@given(F=st.floats(0, 50), d1=st.integers(1, 30), d2=st.integers(1, 60))
def test_f_sf_is_probability(F, d1, d2):
    assert 0.0 <= f_sf(F, d1, d2) <= 1.0
