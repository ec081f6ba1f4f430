import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "numeric",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numeric")


def rel_err(got, want):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = np.maximum(np.abs(want), 1e-300)
    return float(np.max(np.abs(got - want) / scale))


@pytest.fixture
def rel():
    return rel_err


@pytest.fixture
def two_point_prior_d8():
    import polar_denoise as pd

    return pd.generate_synthetic("two_point", 8, 2, 0, {"separation": 2.0})


@pytest.fixture
def kernel_d8():
    import polar_denoise as pd

    return pd.KernelParams(8, 1.0)
