"""Numerical toolkit for fast-slow partially hyperbolic maps on the torus.

A map ``F_eps(x, theta) = (f(x, theta), theta + eps * omega(x, theta))`` with
an expanding fast variable is compared with its averaged equation, with the
small-noise diffusion built from the averaged fields, and with its center
foliation.
"""
from .averaged import (DegenerateZeroError, OdeSolution, Zero, ZeroSet, VarianceCurve,
                       find_zeros, solve_averaged, variance_curve)
from .ensemble import (InitialEnsemble, compare_det_vs_sde, deviation_samples,
                       fit_metastable, ks_normal, run_deterministic, srb_structure_check,
                       tv_distance)
from .foliation import (conjugacy, holonomy_probe, integrate_leaf, integrate_leaves,
                        multiplier_obstruction)
from .lyapunov import (CenterField, center_field, chi_c_formula, chi_c_orbit,
                       frozen_center_slope)
from .stochastic import (EnsembleSamples, SdeSpec, em_paths, metastable_mixture, rate_function,
                         shooting_jacobian, stationary_density)
from .systems import (FastSlowSystem, NonExpandingWarning, example_family, iterate,
                      skew_product, step)
from .transfer import SlowFields, averaged_drift, green_kubo_var2, slow_fields

__version__ = "0.1.0"

__all__ = [
    "CenterField", "DegenerateZeroError", "EnsembleSamples", "FastSlowSystem", "InitialEnsemble",
    "NonExpandingWarning", "OdeSolution", "SdeSpec", "SlowFields", "VarianceCurve", "Zero",
    "ZeroSet", "averaged_drift", "center_field", "chi_c_formula", "chi_c_orbit",
    "compare_det_vs_sde", "conjugacy", "deviation_samples", "em_paths", "example_family",
    "find_zeros", "fit_metastable", "frozen_center_slope", "green_kubo_var2", "holonomy_probe",
    "integrate_leaf", "integrate_leaves", "iterate", "ks_normal", "metastable_mixture",
    "multiplier_obstruction", "rate_function", "run_deterministic", "shooting_jacobian",
    "skew_product", "slow_fields", "solve_averaged", "srb_structure_check", "stationary_density",
    "step", "tv_distance", "variance_curve",
]
