import math

import numpy as np
import pytest

from fastslow.foliation import (conjugacy, holonomy_probe, integrate_leaf, integrate_leaves,
                                leaf_invariance_error, multiplier_obstruction)
from fastslow.lyapunov import center_field
from fastslow.systems import example_family, skew_product

from conftest import quiet_family

FAMILY = dict(ell=3, alpha=0.05, beta=0.05)


@pytest.fixture(scope="module")
def frozen_field():
    return center_field(example_family(epsilon=0.0, **FAMILY), 256, 128)


def test_frozen_leaves_are_conjugacy_graphs(frozen_field):
    # two routes to the same curve: integrating the center field, and symbolic coding
    s = example_family(epsilon=0.0, **FAMILY)
    h = conjugacy(s, 0.25, n_grid=3 ** 6)
    idx = np.array([73, 270, 583])  # compare on conjugacy nodes, no interpolation
    x0 = h.grid[idx]
    leaves = integrate_leaves(frozen_field, np.column_stack([x0, np.zeros(3)]), 1 / 512)
    at_quarter = np.array([lf.x_values[128] for lf in leaves])
    assert np.max(np.abs(at_quarter - h.values[idx])) < 1e-6


def test_leaves_close_and_are_short():
    cf = center_field(example_family(epsilon=1e-3, **FAMILY), 256, 128)
    pts = np.random.default_rng(2).random((8, 2))
    for lf in integrate_leaves(cf, pts, 1 / 512):
        assert lf.closure_gap < 1e-6
        assert 1.0 <= lf.length <= lf.bound


def test_leaf_invariance():
    s = example_family(epsilon=1e-3, **FAMILY)
    cf = center_field(s, 256, 128)
    leaf = integrate_leaf(cf, (0.3, 0.1), 1 / 512)
    assert leaf_invariance_error(cf, s, leaf, n_points=8, step=1 / 512) < 1e-6


def test_skew_leaves_are_vertical():
    cf = center_field(skew_product(1e-3), 16, 16)
    lf = integrate_leaf(cf, (0.4, 0.0), 1 / 16)
    assert np.all(lf.x_values == 0.4)
    assert lf.length == pytest.approx(1.0)


def test_conjugacy_properties():
    s = example_family(epsilon=0.0, **FAMILY)
    ident = conjugacy(s, 0.0, n_grid=243)
    assert np.allclose(ident.values, ident.grid, atol=1e-12)
    h = conjugacy(s, 0.3, n_grid=243)
    assert h.residual < 1e-12
    assert np.all(np.diff(h.values) > 0)
    with pytest.raises(ValueError):
        conjugacy(s, 0.3, n_grid=100)
    with pytest.raises(ValueError):
        conjugacy(quiet_family(2, 0.05, 0.1), 0.75, n_grid=256)


def test_multiplier_table():
    rep = multiplier_obstruction(quiet_family(2, 0.05, 0.1), [0.0, 0.25, 0.5])
    assert rep.multipliers == pytest.approx([2.0, 2 + 2 * math.pi * 0.25, 2.0])
    assert rep.spread == pytest.approx(2 * math.pi * (0.05 + 2 * 0.1))
    assert rep.obstructed
    assert not multiplier_obstruction(skew_product(), [0.0, 0.25]).obstructed


def test_holonomy_probe_runs_monotone(frozen_field):
    rep = holonomy_probe(frozen_field, 0.0, 0.25, n_points=16, refinements=2, step=1 / 128)
    assert rep.n_points == (16, 32)
    assert np.all(rep.ratios > 0)
    assert len(rep.log_ratio_var) == 2
