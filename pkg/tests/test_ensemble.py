import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from fastslow.averaged import find_zeros, solve_averaged
from fastslow.ensemble import (CHUNK, EmptyBasinWarning, Histogram, InitialEnsemble,
                               common_edges, compare_det_vs_sde, deviation_samples,
                               exceedance_stats, fit_metastable, histogram, ks_normal,
                               ks_two_sample, propagate, run_deterministic, srb_structure_check,
                               tv_distance)
from fastslow.stochastic import EnsembleSamples, metastable_mixture
from fastslow.systems import example_family, skew_product
from fastslow.transfer import slow_fields


def test_standard_pair_constraints():
    with pytest.raises(ValueError):
        InitialEnsemble(0.1, 1e-3, 10, slope=0.01)
    with pytest.raises(ValueError):
        InitialEnsemble(0.1, 1e-3, 10, length=0.2)
    with pytest.raises(ValueError):
        InitialEnsemble(0.1, 1e-3, 10, kappa=2.0)


def test_initial_density_and_sampler():
    init = InitialEnsemble(0.1, 1e-2, 50_000, x_start=0.2, kappa=0.8, slope=0.005)
    mass, _ = quad(init.density, 0.2, 0.7)
    assert mass == pytest.approx(1.0, abs=1e-12)
    x, th = init.sample(3)
    assert np.all((x >= 0.2) & (x <= 0.7))
    assert np.allclose(th, 0.1 + 0.005 * (x - 0.2))
    # the inverse CDF inverts the CDF
    u = np.linspace(0, 1, 11)
    cdf = [quad(init.density, 0.2, v)[0] for v in init.inverse_cdf(u)]
    assert np.allclose(cdf, u, atol=1e-10)
    assert ks_two_sample(x, init.inverse_cdf(np.random.default_rng(0).random(50_000))) < 0.015


def test_deterministic_run_is_worker_invariant():
    s = skew_product(1e-2)
    init = InitialEnsemble(0.1, 1e-2, CHUNK + 100)
    a = run_deterministic(s, init, [0.05, 0.1], seed=7)
    b = run_deterministic(s, init, [0.05, 0.1], seed=7, workers=3)
    assert all(np.array_equal(p.values, q.values) for p, q in zip(a, b))


def test_time_interpolation_and_propagate():
    s = skew_product(0.1, drift_amplitude=0.0, drift_shift=1.0, fast_amplitude=0.0)
    init = InitialEnsemble(0.0, 0.1, 5)
    out = run_deterministic(s, init, [0.25])[0]
    assert np.allclose(out.values, 0.25)
    _, th = propagate(s, np.zeros(3), np.zeros(3), 7)
    assert np.allclose(th, 0.7)


def test_budget_and_epsilon_checks():
    s = skew_product(1e-3)
    with pytest.raises(MemoryError):
        run_deterministic(s, InitialEnsemble(0.0, 1e-3, 1000), [10.0], budget=1e5)
    with pytest.raises(ValueError):
        run_deterministic(s, InitialEnsemble(0.0, 1e-2, 10), [1.0])


def test_deviations_near_sink_are_gaussian():
    # skew product at the sink: Var_t^2 = (1/2)(1 - e^{-4 pi t}) / (4 pi)
    eps, t = 1e-3, 0.5
    s = skew_product(eps)
    f = slow_fields(s.with_epsilon(0.0), m=64, n_bins=256, psi=False)
    samples = run_deterministic(s, InitialEnsemble(0.0, eps, 20_000), [t], seed=1)[0]
    dev = deviation_samples(samples, solve_averaged(f, 0.0, t))
    vt2 = 0.5 * (1 - math.exp(-4 * math.pi * t)) / (4 * math.pi)
    assert ks_normal(dev.values, 0.0, vt2) < 0.02


def test_histogram_validation():
    with pytest.raises(ValueError):
        Histogram(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        Histogram(np.array([0.0, 2.0, 1.0]), np.array([0.5, 0.5]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=50),
       st.lists(st.floats(-1, 1), min_size=5, max_size=50))
def test_tv_is_a_metric_on_histograms(a, b):
    edges = common_edges(0.1, np.array(a), np.array(b))
    ha, hb = histogram(a, edges), histogram(b, edges)
    d = tv_distance(ha, hb)
    assert 0.0 <= d <= 1.0 + 1e-12
    assert d == pytest.approx(tv_distance(hb, ha))
    assert tv_distance(ha, ha) == 0.0


def test_ks_normal_on_exact_samples():
    z = np.random.default_rng(5).normal(0.3, 2.0, 50_000)
    assert ks_normal(z, 0.3, 4.0) < 0.01
    assert ks_normal(z, 0.0, 1.0) > 0.1


def test_compare_tv_decays():
    s = example_family(3, 0.05, 0.05)
    f = slow_fields(s, m=64, n_bins=512, psi=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = compare_det_vs_sde(s, f, 0.1, 0.5, epsilons=(1e-2, 1e-3), n=20_000, seed=3)
    assert rep.tvs[1] < rep.tvs[0]
    for r in rep.rows:
        assert r.det_var == pytest.approx(r.sde_var, rel=0.15)


def test_fit_metastable_two_sinks():
    from fastslow.transfer import SlowFields
    f = SlowFields.from_functions(lambda t: -np.sin(4 * math.pi * t), lambda t: 1 + 0 * t, m=128)
    z = find_zeros(f)
    mix = metastable_mixture(z, f, 1e-3)
    rng = np.random.default_rng(0)
    vals = np.concatenate([rng.normal(0.0, math.sqrt(mix[0].var), 3000),
                           rng.normal(0.5, math.sqrt(mix[1].var), 1000)])
    fit = fit_metastable(vals, mix, z)
    assert fit.weights == pytest.approx([0.75, 0.25])
    assert np.all(fit.ks < 0.03)
    with pytest.warns(EmptyBasinWarning):
        fit_metastable(vals[:3000], mix, z)


def test_srb_structure_rotation_regime():
    eps = 1e-2
    s = skew_product(eps, drift_shift=1.5)
    f = slow_fields(s.with_epsilon(0.0), m=64, n_bins=256, psi=False)
    init = InitialEnsemble(0.0, eps, 20_000)
    _, (x, th) = run_deterministic(s, init, [20.0], seed=2, return_state=True)
    chk = srb_structure_check(s, f, x, th, nx=8, ntheta=8, n_bins=256,
                              expected_regime="rotation")
    assert chk.regime == "rotation"
    assert chk.tv < 0.05


def test_exceedance_stats():
    d = np.array([[0.1, -0.5], [0.2, 0.3], [-1.0, 0.0], [0.05, 0.05]])
    out = exceedance_stats(d, [0.25, 0.6, 2.0])
    assert out[:, 1] == pytest.approx([0.75, 0.25, 0.0])
    assert exceedance_stats(EnsembleSamples(np.zeros(4), 1.0, 1e-3), [0.0])[0, 1] == 1.0
