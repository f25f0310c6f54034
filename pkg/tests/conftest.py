import math
import warnings

import numpy as np
import pytest

from fastslow.systems import NonExpandingWarning, example_family
from fastslow.transfer import SlowFields, slow_fields

TWO_PI = 2 * math.pi


@pytest.fixture(scope="session")
def reference_fields():
    """Example-family fields at a resolution that keeps the suite fast."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = example_family(2, 0.05, 0.1)
        return slow_fields(s, m=64, n_bins=1024, psi=False)


@pytest.fixture
def sink_fields():
    """bar omega = -sin(2 pi theta), Var^2 = 1/2: sink at 0, source at 1/2."""
    return SlowFields.from_functions(lambda t: -np.sin(TWO_PI * t), lambda t: 0.5 + 0 * t,
                                     m=256, omega_bar_prime=lambda t: -TWO_PI * np.cos(TWO_PI * t))


@pytest.fixture
def rotation_fields():
    return SlowFields.from_functions(lambda t: 1 + 0.5 * np.sin(TWO_PI * t),
                                     lambda t: 1 + 0.3 * np.cos(TWO_PI * t), m=512,
                                     omega_bar_prime=lambda t: 0.5 * TWO_PI * np.cos(TWO_PI * t))


def quiet_family(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonExpandingWarning)
        return example_family(*args, **kw)
