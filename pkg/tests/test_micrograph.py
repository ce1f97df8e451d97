import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topocorr.micrograph import (
    equalize,
    interpolate_nonmeasured,
    level_plane,
    pixel_correlation,
    read_csv_grid,
    read_heightmap,
    sa,
    sq,
    step_height_histogram,
    write_heightmap,
)
from topocorr.model import Micrograph, ValidationError


def two_level(ny, nx, frac, h):
    z = np.zeros((ny, nx))
    k = int(round(frac * nx))
    z[:, k:] = h
    return Micrograph(z, 1.0, 1.0), (nx - k) / nx


@pytest.mark.parametrize("frac,h", [(0.5, 2.0), (0.25, 3.0), (0.8, 0.7)])
def test_two_level_closed_forms(frac, h):
    m, p = two_level(10, 40, frac, h)
    assert abs(sq(m) - h * math.sqrt(p * (1 - p))) <= 1e-9
    assert abs(sa(m) - 2 * h * p * (1 - p)) <= 1e-9


def test_masked_pixels_are_ignored():
    z = np.array([[1.0, 1.0, 100.0], [-1.0, -1.0, 100.0]])
    mask = np.array([[True, True, False], [True, True, False]])
    m = Micrograph(z, 1, 1, mask)
    assert sq(m) == pytest.approx(1.0)
    assert sa(m) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        sq(Micrograph(np.full((2, 2), np.nan), 1, 1))


def test_level_plane_removes_tilt():
    yy, xx = np.mgrid[0:20, 0:30]
    m = Micrograph(0.3 + 0.01 * xx - 0.02 * yy, 0.5, 0.5)
    assert sq(level_plane(m)) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_step_height_recovered_under_noise(seed):
    rng = np.random.default_rng(seed)
    h = 5.0
    z = np.where(np.arange(200)[None, :] < 100, 0.0, h) + rng.normal(0, 0.1, (100, 200))
    r = step_height_histogram(Micrograph(z, 1, 1))
    assert abs(r.height - h) <= 0.05


def test_step_errors_and_warning():
    with pytest.raises(ValidationError):
        step_height_histogram(Micrograph(np.ones((5, 5)), 1, 1))
    z = np.concatenate([np.zeros(300), np.full(300, 5.0), np.full(100, 10.0)]).reshape(7, 100)
    with pytest.warns(UserWarning):
        step_height_histogram(Micrograph(z, 1, 1), bin_width=0.5)


def test_equalize_identity():
    z = np.random.default_rng(0).normal(size=(12, 17))
    e = equalize(Micrograph(z, 0.7, 0.3), 17, 12, 0.7, 0.3)
    assert np.max(np.abs(e.heights - z)) <= 1e-12


def test_equalize_reproduces_affine_surface():
    yy, xx = np.mgrid[0:21, 0:31]
    dx, dy = 0.4, 0.6
    z = 1.5 + 0.2 * xx * dx - 0.7 * yy * dy
    e = equalize(Micrograph(z, dx, dy), 19, 13, 0.65, 0.95)
    ty, tx = np.mgrid[0:13, 0:19]
    expect = 1.5 + 0.2 * tx * 0.65 - 0.7 * ty * 0.95
    assert np.max(np.abs(e.heights - expect)) <= 1e-12


def test_equalize_propagates_invalid_support():
    z = np.zeros((5, 5))
    z[2, 2] = np.nan
    e = equalize(Micrograph(z, 1.0, 1.0), 9, 9, 0.5, 0.5)
    assert (~e.mask).sum() == 9  # the hole and its 8 half-pixel neighbours
    assert not e.mask[4, 4]
    with pytest.raises(ValidationError):
        equalize(Micrograph(z, 1.0, 1.0), 10, 5, 1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-1, 1), c=st.floats(-1, 1),
       tdx=st.floats(0.3, 1.0), tdy=st.floats(0.3, 1.0))
def test_equalize_affine_property(a, b, c, tdx, tdy):
    yy, xx = np.mgrid[0:15, 0:15]
    m = Micrograph(a + b * xx + c * yy, 1.0, 1.0)
    nx, ny = int(14 / tdx) + 1, int(14 / tdy) + 1
    e = equalize(m, nx, ny, tdx, tdy)
    ty, tx = np.mgrid[0:ny, 0:nx]
    assert np.max(np.abs(e.heights - (a + b * tx * tdx + c * ty * tdy))) <= 1e-11


def test_correlation_symmetry_and_diagonal():
    z = np.random.default_rng(5).normal(size=(40, 9))
    r = pixel_correlation(Micrograph(z, 1, 1))
    assert np.max(np.abs(r.matrix - r.matrix.T)) <= 1e-12
    assert np.max(np.abs(np.diag(r.matrix) - 1.0)) <= 1e-12
    assert np.allclose(r.matrix, np.corrcoef(z, rowvar=False), atol=1e-12)


def test_correlation_window_and_stack():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(30, 11))
    r = pixel_correlation(Micrograph(z, 1, 1), rows_window=3)
    assert r.columns.tolist() == [4, 5, 6]
    stack = [Micrograph(rng.normal(size=(5, 7)), 1, 1) for _ in range(10)]
    s = pixel_correlation(stack, mode="stack")
    assert s.matrix.shape == (7, 7)
    assert np.max(np.abs(s.matrix - s.matrix.T)) <= 1e-12


def test_correlation_zero_variance_column():
    z = np.random.default_rng(7).normal(size=(10, 3))
    z[:, 1] = 2.0
    r = pixel_correlation(Micrograph(z, 1, 1))
    assert r.masked.tolist() == [False, True, False]
    assert np.isnan(r.matrix[1, 0])


def test_fill_policies():
    z = np.array([[1.0, np.nan, 3.0]])
    m = Micrograph(z, 1, 1)
    assert interpolate_nonmeasured(m) is m
    f = interpolate_nonmeasured(m, "nearest-fill")
    assert f.mask.all() and f.filled.tolist() == [[False, True, False]]
    assert f.heights[0, 1] in (1.0, 3.0)
    with pytest.raises(ValidationError):
        interpolate_nonmeasured(m, "spline")


@pytest.mark.parametrize("unit", ["um", "nm", "mm"])
def test_heightmap_round_trip(tmp_path, unit):
    z = np.array([[0.5, np.nan], [1.25, -2.0]])
    m = Micrograph(z, 0.25, 0.5)
    p = tmp_path / "m.hm"
    write_heightmap(m, p, unit)
    back = read_heightmap(p)
    assert back.mask.tolist() == m.mask.tolist()
    assert np.allclose(back.valid(), m.valid(), rtol=1e-6)
    assert (back.pixel_dx, back.pixel_dy) == (0.25, 0.5)


def test_heightmap_errors(tmp_path):
    p = tmp_path / "bad.hm"
    p.write_bytes(b"#topocorr-heightmap v1\nnx: 2\nny: 2\npixel_dx_um: 1\npixel_dy_um: 1\nend_header\n" + b"\0" * 8)
    with pytest.raises(ValidationError):
        read_heightmap(p)
    g = tmp_path / "g.csv"
    g.write_text("1,2\n3\n")
    with pytest.raises(ValidationError):
        read_csv_grid(g)
    g.write_text("1,,3\n4,5,6\n")
    assert read_csv_grid(g).mask.sum() == 5
