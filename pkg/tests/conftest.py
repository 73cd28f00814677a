import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ddspec", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ddspec")

DENSE_BATH = dict(b=2.46, tau_c_slow=2.54, tau_c_fast=0.25)
DILUTE_BATH = dict(b=0.12, tau_c_slow=28.6, tau_c_fast=0.25)


@pytest.fixture
def dense_bath():
    from ddspec.noise import SpectralModel

    return SpectralModel.double_lorentzian(**DENSE_BATH)


@pytest.fixture
def dilute_bath():
    from ddspec.noise import SpectralModel

    return SpectralModel.double_lorentzian(**DILUTE_BATH)


def log_bins(x, per_decade=5):
    edges = np.logspace(np.log10(x[0]), np.log10(x[-1]) + 1e-9, int(np.log10(x[-1] / x[0]) * per_decade) + 2)
    return np.digitize(x, edges)
