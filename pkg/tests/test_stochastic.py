import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.optimize import minimize

from fastslow.averaged import find_zeros, solve_averaged, variance_curve
from fastslow.stochastic import (CHUNK, SdeSpec, adjoint_generator_residual, chunk_rng, em_paths,
                                 gaussian_process_law, metastable_mixture, rate_function,
                                 shooting_jacobian, stationary_density)
from fastslow.transfer import SlowFields

from conftest import TWO_PI


def constant_fields(c, v, m=128):
    return SlowFields.from_functions(lambda t: c + 0 * t, lambda t: v + 0 * t, m=m,
                                     omega_bar_prime=lambda t: 0 * t)


def test_chunk_streams_are_deterministic_and_distinct():
    a = chunk_rng(5, 1, 3).random(4)
    assert np.array_equal(a, chunk_rng(5, 1, 3).random(4))
    assert not np.array_equal(a, chunk_rng(5, 1, 4).random(4))
    assert not np.array_equal(a, chunk_rng(5, 2, 3).random(4))


def test_step_constraints(sink_fields):
    assert SdeSpec(sink_fields, 1e-2).step == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        SdeSpec(sink_fields, 1e-2, step=2e-2)
    with pytest.raises(ValueError):
        SdeSpec(constant_fields(1.0, 0.0), 1e-2)


def test_em_independent_of_workers(sink_fields):
    spec = SdeSpec(sink_fields, 1e-2, step=1e-2, seed=4)
    n = 2 * CHUNK + 17
    a = em_paths(spec, 0.1, 0.2, n, workers=1)
    b = em_paths(spec, 0.1, 0.2, n, workers=3)
    assert np.array_equal(a.values, b.values)


def test_em_exact_for_constant_coefficients():
    # Theta(T) = theta0 + c T + sqrt(eps v T) N(0, 1) exactly
    eps, c, v, T = 1e-2, 0.7, 0.4, 0.5
    spec = SdeSpec(constant_fields(c, v), eps, step=eps, seed=1)
    s = em_paths(spec, 0.2, T, 20_000)
    z = (s.values - 0.2 - c * T) / math.sqrt(eps * v * T)
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_em_without_noise_follows_averaged_flow(sink_fields):
    spec = SdeSpec(sink_fields, 1e-3, step=1e-4)
    s = em_paths(spec, 0.3, 0.5, 3, noise=False)
    ode = solve_averaged(sink_fields, 0.3, 0.5, 1e-3).final
    assert np.allclose(s.values, ode, atol=1e-4)


def test_em_matches_gaussian_law(sink_fields):
    eps, t = 1e-3, 0.5
    spec = SdeSpec(sink_fields, eps, seed=2)
    end, snaps = em_paths(spec, 0.2, t, 10_000, snapshot_times=[0.25])
    mean, var = gaussian_process_law(sink_fields, 0.2, t, eps)
    assert end.mean == pytest.approx(mean, abs=4 * math.sqrt(var / 1e4) + 2 * eps)
    assert end.var == pytest.approx(var, rel=0.06)
    assert snaps[0.25].t == 0.25


def test_stationary_constant_fields():
    c, v = 0.7, 0.4
    d = stationary_density(constant_fields(c, v, m=256), 1e-2)
    assert np.allclose(d.rho, 1.0, atol=1e-10)
    assert d.flux == pytest.approx(c, rel=1e-9)
    assert d.v_eps < 0  # sign of -Omega_1 = 2 c / v
    assert d.Omega_1 == pytest.approx(-2 * c / v, rel=1e-12)


def test_stationary_without_drift():
    var2 = lambda t: 1 + 0.3 * np.cos(TWO_PI * t)  # noqa: E731
    f = SlowFields.from_functions(lambda t: 0 * t, var2, m=256)
    d = stationary_density(f, 1e-2)
    ref = 1 / var2(d.theta_grid)
    assert d.v_eps == 0.0 and d.flux == 0.0
    assert np.allclose(d.rho, ref / ref.mean(), atol=1e-12)


def test_stationary_gradient_case():
    # Omega_1 = 0, so rho is proportional to exp(-Omega / eps) / v
    v, eps = 0.5, 0.05
    f = SlowFields.from_functions(lambda t: -np.sin(TWO_PI * t), lambda t: v + 0 * t, m=1024)
    d = stationary_density(f, eps)
    om = (1 - np.cos(TWO_PI * d.theta_grid)) / (math.pi * v)
    ref = np.exp(-om / eps)
    assert abs(d.Omega_1) < 1e-12
    assert np.allclose(d.rho, ref / ref.mean(), rtol=1e-6, atol=1e-12)


def test_stationary_rotation_limit(rotation_fields):
    sups = []
    for eps in (1e-2, 1e-3):
        d = stationary_density(rotation_fields, eps, m=4096)
        assert abs(d.mass - 1) < 1e-12
        assert adjoint_generator_residual(rotation_fields, d) < 1e-3
        assert d.flux > 0  # drift is positive everywhere
        ref = 1 / rotation_fields.interpolant().omega_bar(d.theta_grid)
        sups.append(np.max(np.abs(d.rho - ref / ref.mean())))
    assert sups[1] < 0.2 * sups[0]


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-1, 1), c=st.floats(-0.5, 0.5),
       eps=st.sampled_from([1e-1, 1e-2, 3e-3]))
def test_stationary_mass_and_residual(a, b, c, eps):
    f = SlowFields.from_functions(lambda t: a + b * np.sin(TWO_PI * t),
                                  lambda t: 1 + c * np.cos(TWO_PI * t), m=2048)
    d = stationary_density(f, eps)
    assert abs(d.mass - 1) < 1e-10
    assert np.all(d.rho > 0)
    assert adjoint_generator_residual(f, d) < 1e-2
    if a + b * 0 != 0:
        assert np.sign(d.flux) == np.sign(np.sum(f.omega_bar / f.var2)) or abs(d.flux) < 1e-12


def test_metastable_mixture(sink_fields):
    mix = metastable_mixture(find_zeros(sink_fields), sink_fields, 1e-3)
    assert len(mix) == 1
    assert mix[0].mean == pytest.approx(0.0, abs=1e-9)
    assert mix[0].var == pytest.approx(1e-3 * 0.5 / (2 * TWO_PI), rel=1e-6)


def test_rate_function_constant_fields():
    v, t = 0.4, 1.3
    f = constant_fields(0.7, v)
    y = np.array([-0.2, -0.05, 0.0, 0.1, 0.3])
    r = rate_function(f, 0.1, t, y)
    assert not r.failed
    assert np.allclose(r.V, y ** 2 / (v * t), rtol=1e-8, atol=1e-14)


def test_rate_function_against_action_minimisation(rotation_fields):
    fi = rotation_fields.interpolant()
    t, th0, n = 1.0, 0.0, 200
    end = solve_averaged(rotation_fields, th0, t, 1e-3).final
    h = t / n

    def action(inner, y):
        phi = np.concatenate([[th0], inner, [end + y]])
        mid = 0.5 * (phi[1:] + phi[:-1])
        return np.sum((np.diff(phi) / h - fi.omega_bar(mid)) ** 2 / fi.var2(mid)) * h

    y = 0.08
    guess = solve_averaged(rotation_fields, th0, t, h).values[1:-1] + y * np.arange(1, n) / n
    direct = minimize(action, guess, args=(y,), method="L-BFGS-B",
                      options=dict(maxiter=20000, maxfun=10 ** 7)).fun
    assert rate_function(rotation_fields, th0, t, [y]).V[0] == pytest.approx(direct, rel=1e-3)


def test_quadratic_regime_at_small_y(sink_fields):
    t = 1.0
    vt2 = variance_curve(sink_fields, solve_averaged(sink_fields, 0.0, t, 1e-3)).final
    r = rate_function(sink_fields, 0.0, t, [1e-3, -1e-3])
    assert np.allclose(r.V, 1e-6 / vt2, rtol=1e-2)


def test_shooting_jacobian(sink_fields, rotation_fields):
    for f, th0 in ((sink_fields, 0.2), (rotation_fields, 0.0)):
        jac, xi = shooting_jacobian(f, th0, 1.0)
        assert jac == pytest.approx(xi, rel=1e-8)
