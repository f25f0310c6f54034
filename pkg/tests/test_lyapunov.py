import math

import numpy as np
import pytest

from fastslow.lyapunov import (ContractionError, center_field, chi_c_formula, chi_c_orbit,
                               frozen_center_slope, graph_transform, invariant_radius,
                               mostly_contracting, psi_bar_star, psi_star_field)
from fastslow.systems import example_family, skew_product, step

from conftest import quiet_family


@pytest.fixture(scope="module")
def expanding():
    return example_family(3, 0.05, 0.05, 1e-3)


@pytest.fixture(scope="module")
def field_eps(expanding):
    return center_field(expanding, 128, 64)


def test_frozen_field_matches_series():
    s = example_family(3, 0.05, 0.05, 0.0)
    cf = center_field(s, 128, 64)
    pts = np.random.default_rng(0).random((100, 2))
    got = cf.slope(pts[:, 0], pts[:, 1])
    assert np.max(np.abs(got - frozen_center_slope(s, pts[:, 0], pts[:, 1]))) < 1e-10


def test_center_field_is_invariant(expanding, field_eps):
    cf = field_eps
    assert cf.sigma < 1 and cf.sigma <= cf.sigma_bound + 0.05
    assert cf.residual < 1e-8
    assert np.max(np.abs(cf.grid)) <= cf.K
    # refined slopes satisfy s = Xi(s o F) at off-grid points
    x, th = np.random.default_rng(1).random((2, 50))
    fx, ft = step(expanding, x, th)
    lhs = cf.slope(x, th)
    rhs = graph_transform(expanding, x, th, cf.slope(fx, ft))
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_skew_product_center_is_vertical_axis():
    cf = center_field(skew_product(1e-3), 32, 32)
    assert np.all(cf.grid == 0.0)


def test_non_expanding_rejected():
    with pytest.raises(ContractionError):
        invariant_radius(quiet_family(2, 0.05, 0.1, 1e-3))


def test_skew_product_formula_is_exact():
    assert chi_c_formula(skew_product(), [0.0], n_bins=256) == pytest.approx(-2 * math.pi,
                                                                              abs=1e-12)


def test_example_family_formula_value():
    # mu_0 = Lebesgue and s_* = -sum_k f_theta(ell^k x) / ell^(k+1); only the alpha term
    # correlates with omega_x, giving 2 pi^2 alpha / ell
    for ell, alpha in ((2, 0.05), (3, 0.08)):
        s = quiet_family(ell, alpha, 0.05)
        assert psi_bar_star(s, [0.0], n_bins=2048)[0] == pytest.approx(
            2 * math.pi ** 2 * alpha / ell, rel=1e-5)


def test_skew_orbit_exponent():
    est = chi_c_orbit(skew_product(1e-2), np.column_stack([np.linspace(0.1, 0.9, 4),
                                                           np.zeros(4)]), 20_000)
    assert est.chi_c < 0
    assert est.scaled == pytest.approx(-2 * math.pi, rel=0.1)


def test_orbit_and_formula_agree_for_expanding_family():
    s = example_family(3, 0.08, 0.05, 1e-3)
    est = chi_c_orbit(s, np.column_stack([np.linspace(0.1, 0.9, 8), np.zeros(8)]), 20_000)
    formula = chi_c_formula(s.with_epsilon(0.0), [0.0], n_bins=1024)
    assert est.scaled == pytest.approx(formula, abs=0.1)


def test_formula_validation():
    with pytest.raises(ValueError):
        chi_c_formula(skew_product(), [])
    with pytest.raises(ValueError):
        chi_c_formula(skew_product(), [0.0, 0.5], weights=[0.7, 0.7])


def test_contracting_flag(expanding, field_eps):
    assert mostly_contracting([-0.1, -2.0])
    assert not mostly_contracting([-0.1, 0.3])
    assert psi_star_field(expanding, field_eps).shape == field_eps.grid.shape
