import math
import warnings

import numpy as np
import pytest

from fastslow.systems import FastSlowSystem, example_family, skew_product, step
from fastslow.transfer import (BranchResolutionError, DegenerateVarianceWarning, SlowFields,
                               averaged_drift, build_ulam, green_kubo_var2, midpoints, slow_fields,
                               srb_density)

from conftest import TWO_PI, quiet_family


def doubling_with(omega, omega_x):
    """``f = 2x`` with a theta-independent drift."""
    return FastSlowSystem.from_callables(
        lambda x, t: 2 * x + 0 * t, omega, lambda x, t: 2 + 0 * (x + t),
        lambda x, t: 0 * (x + t), omega_x, lambda x, t: 0 * (x + t))


def test_ulam_is_row_stochastic():
    op = build_ulam(example_family(3, 0.05, 0.05), 0.3, 512)
    assert np.allclose(op.row_sums(), 1.0, atol=1e-13)
    assert op.matrix.min() >= 0


def test_lebesgue_is_invariant_for_linear_map():
    dens = srb_density(build_ulam(skew_product(), 0.7, 256))
    assert np.allclose(dens.values, 1.0, atol=1e-12)


def test_srb_density_matches_monte_carlo_histogram():
    s = example_family(3, 0.05, 0.05)
    theta = 0.25
    dens = srb_density(build_ulam(s, theta, 2048))
    coarse = dens.mass.reshape(16, -1).sum(axis=1)
    x = np.random.default_rng(3).random(400_000)
    th = np.full_like(x, theta)
    for _ in range(25):
        x, _ = step(s, x, th)
    hist = np.histogram(x, bins=16, range=(0, 1))[0] / len(x)
    assert np.max(np.abs(hist - coarse)) < 4e-3
    assert np.ptp(coarse) > 0.01  # the density is visibly non-uniform


def test_folding_map_is_rejected():
    s = quiet_family(2, 0.05, 0.2, require_diffeo=False)
    with pytest.raises(BranchResolutionError):
        build_ulam(s, 0.75, 256)


def test_green_kubo_doubling_cosine_is_half():
    gk = green_kubo_var2(skew_product(), 0.0, 1024)
    assert gk.var2 == pytest.approx(0.5, abs=1e-10)


def test_green_kubo_with_one_nonzero_lag():
    # g = cos 2 pi x + cos 4 pi x: C_0 = 1, C_1 = E[cos^2 4 pi x] = 1/2, rest vanish
    s = doubling_with(lambda x, t: np.cos(TWO_PI * x) + np.cos(2 * TWO_PI * x) + 0 * t,
                      lambda x, t: -TWO_PI * (np.sin(TWO_PI * x) + 2 * np.sin(2 * TWO_PI * x)))
    gk = green_kubo_var2(s, 0.0, 1024)
    assert gk.var2 == pytest.approx(2.0, abs=1e-4)


def test_coboundary_has_zero_variance():
    # h - h o f with h = cos 2 pi x
    s = doubling_with(lambda x, t: np.cos(TWO_PI * x) - np.cos(2 * TWO_PI * x) + 0 * t,
                      lambda x, t: -TWO_PI * (np.sin(TWO_PI * x) - 2 * np.sin(2 * TWO_PI * x)))
    v = [green_kubo_var2(s, 0.0, n).var2 for n in (256, 1024)]
    assert abs(v[1]) < 1e-5
    assert abs(v[1]) < abs(v[0]) / 10  # the Ulam error decays, the limit is 0
    with pytest.warns(DegenerateVarianceWarning):
        slow_fields(s, m=64, n_bins=256, psi=False, var2_floor=1e-3)


def test_constant_drift_has_exactly_zero_variance():
    s = skew_product(fast_amplitude=0.0, drift_amplitude=0.0, drift_shift=0.7)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVarianceWarning)
        f = slow_fields(s, m=64, n_bins=256, psi=False)
    assert np.all(f.var2 == 0.0)
    assert np.allclose(f.omega_bar, 0.7)


def test_skew_product_averaged_drift():
    s = skew_product(drift_amplitude=0.8, drift_shift=0.1)
    for th in (0.0, 0.2, 0.65):
        assert averaged_drift(s, th, 512) == pytest.approx(-0.8 * math.sin(TWO_PI * th) + 0.1,
                                                           abs=1e-12)


@pytest.mark.parametrize("beta", [0.05, 0.1, 0.2])
def test_averaged_slope_at_sink(beta):
    s = quiet_family(2, 0.05, beta, require_diffeo=False)
    h = 1 / 256
    slope = (averaged_drift(s, h, 2048) - averaged_drift(s, -h, 2048)) / (2 * h)
    assert slope == pytest.approx(-2 * math.pi ** 2 * beta, rel=0.02)


def test_reference_fields_values(reference_fields):
    f = reference_fields
    assert f.omega_bar[0] == pytest.approx(0.0, abs=1e-12)
    assert f.var2[0] == pytest.approx(0.5, abs=1e-6)
    assert f.omega_bar_prime[0] == pytest.approx(-2 * math.pi ** 2 * 0.1, rel=0.02)


def test_fields_csv_roundtrip(tmp_path, rotation_fields):
    f = rotation_fields.with_psi(np.zeros(rotation_fields.m))
    path = tmp_path / "fields.csv"
    f.to_csv(path)
    g = SlowFields.from_csv(path)
    for name in ("omega_bar", "omega_bar_prime", "var2", "psi_bar_star"):
        assert np.array_equal(getattr(f, name), getattr(g, name))


def test_interpolant_reproduces_trigonometric_field(rotation_fields):
    fi = rotation_fields.interpolant()
    th = np.linspace(-1, 2, 301)
    assert np.allclose(fi.omega_bar(th), 1 + 0.5 * np.sin(TWO_PI * th), atol=1e-8)
    assert np.allclose(fi.omega_bar_prime(th), 0.5 * TWO_PI * np.cos(TWO_PI * th), atol=1e-5)
    assert np.allclose(fi.var2_second(th), -0.3 * TWO_PI ** 2 * np.cos(TWO_PI * th), atol=1e-2)


def test_midpoints():
    assert np.allclose(midpoints(4), [0.125, 0.375, 0.625, 0.875])
