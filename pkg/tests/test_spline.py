import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kanlab.spline import SplineGrid, bspline_basis, bspline_basis_np, least_squares_fit
from kanlab.tensor import Tensor
from tests.test_tensor import fd_check


def test_grid_knots_and_count():
    g = SplineGrid(-1, 1, 5, 3)
    assert g.basis_count == 8
    assert g.knots.size == 5 + 2 * 3 + 1
    np.testing.assert_allclose(np.diff(g.knots), 0.4, atol=1e-9)
    assert g.knots[3] == -1 and g.knots[-4] == pytest.approx(1)


@pytest.mark.parametrize("kw", [dict(g_min=1, g_max=1), dict(grid_size=0), dict(spline_order=-1)])
def test_grid_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        SplineGrid(**kw)


def test_order_zero_indicator():
    g = SplineGrid(0, 1, 2, 0)
    np.testing.assert_array_equal(bspline_basis_np(g, 0.25), [1, 0])


def test_partition_of_unity_at_zero():
    assert bspline_basis_np(SplineGrid(), 0.0).sum() == pytest.approx(1.0, abs=1e-12)


def test_quadratic_peak():
    # knots {0,1,2,3} carry the third of five quadratic bases on [0, 3]
    g = SplineGrid(0, 3, 3, 2)
    vals = bspline_basis_np(g, 1.5)
    assert g.knots[2] == 0 and vals[2] == pytest.approx(0.75, abs=1e-12)


def test_partition_nonnegativity_random(rng):
    x = rng.uniform(-1, 1, size=1000)
    b = bspline_basis_np(SplineGrid(), x)
    assert np.all(b >= 0)
    np.testing.assert_allclose(b.sum(axis=-1), 1.0, atol=1e-6)


def test_upper_endpoint_is_covered():
    g = SplineGrid()
    assert bspline_basis_np(g, 1.0).sum() == pytest.approx(1.0)


def test_outside_support_decays_to_zero():
    b = bspline_basis_np(SplineGrid(), np.array([-5.0, 5.0]))
    np.testing.assert_array_equal(b, 0.0)


@given(st.integers(0, 4), st.integers(1, 7))
def test_local_support(order, size):
    g = SplineGrid(-1, 1, size, order)
    x = np.linspace(g.knots[0] - 0.5, g.knots[-1] + 0.5, 2001)
    b = bspline_basis_np(g, x)
    for r in range(g.basis_count):
        nz = x[b[:, r] > 0]
        assert nz.min() >= g.knots[r] - 1e-12
        assert nz.max() <= g.knots[r + order + 1] + 1e-12


@pytest.mark.parametrize("order", [1, 2, 3])
def test_continuity_at_knots(order):
    g = SplineGrid(-1, 1, 5, order)
    interior = g.knots[order + 1:-(order + 1)]
    eps = 1e-9
    lo = bspline_basis_np(g, interior - eps)
    hi = bspline_basis_np(g, interior + eps)
    np.testing.assert_allclose(lo, hi, atol=1e-6)


def test_basis_gradient_fd(rng):
    g = SplineGrid()
    w = Tensor(rng.normal(size=(8,)))
    fd_check(lambda x: bspline_basis(g, x) * w, [rng.uniform(-0.95, 0.95, size=(3, 4))], h=1e-5)


def test_fit_zero_targets():
    g = SplineGrid()
    x = np.linspace(-1, 1, 41)[:, None]
    coef = least_squares_fit(g, x, np.zeros((41, 1, 2)))
    assert coef.shape == (2, 1, 8)
    np.testing.assert_allclose(coef, 0, atol=1e-8)


def test_fit_reproduces_single_basis():
    g = SplineGrid()
    x = np.linspace(g.knots[0], g.knots[-1], 400)[:, None]
    y = bspline_basis_np(g, x)[..., 4:5]
    coef = least_squares_fit(g, x, y)
    np.testing.assert_allclose(coef[0, 0], np.eye(8)[4], atol=1e-6)


def test_fit_reproduces_linear(rng):
    g = SplineGrid()
    x = np.linspace(-1, 1, 201)[:, None]
    coef = least_squares_fit(g, x, x[..., None])
    fresh = rng.uniform(-1, 1, size=100)
    recon = bspline_basis_np(g, fresh) @ coef[0, 0]
    assert np.max(np.abs(recon - fresh)) < 1e-6


def test_fit_needs_enough_samples():
    with pytest.raises(ValueError):
        least_squares_fit(SplineGrid(), np.zeros((3, 1)), np.zeros((3, 1, 1)))


def test_fit_rank_deficient_warns_but_solves():
    g = SplineGrid()
    x = np.zeros((20, 1))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        coef = least_squares_fit(g, x, np.ones((20, 1, 1)))
    assert np.all(np.isfinite(coef))
    assert any("conditioned" in str(w.message) for w in caught)
