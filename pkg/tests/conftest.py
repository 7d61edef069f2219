import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bandtransport.bloch import bands_at_points, cutoff_for_count
from bandtransport.lattice import cosine_preset, crossing_preset, honeycomb_preset
from bandtransport.transport import RandomMedium

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TWO_PI = 2 * np.pi


@pytest.fixture(scope="session")
def cosine():
    return cosine_preset(0.2)


@pytest.fixture(scope="session")
def crossing():
    return crossing_preset(0.1)


@pytest.fixture(scope="session")
def honeycomb():
    return honeycomb_preset(0.1)


@pytest.fixture(scope="session")
def honeycomb_cutoff(honeycomb):
    return cutoff_for_count(honeycomb[0], 200)


@pytest.fixture(scope="session")
def valley_bands(honeycomb, honeycomb_cutoff):
    _, pot, k_point, k_prime = honeycomb
    return bands_at_points(pot, np.stack([k_point, k_prime]), cutoff=honeycomb_cutoff)


@pytest.fixture(scope="session")
def valley_medium():
    return RandomMedium(0.05, 0.3)


def gaussian_sigma(width=0.5, diag=(1.0, 0.5), offdiag=0.2, modulate=None):
    """sigma0(x, i) factory: Gaussian envelope centred in a 2pi box times a fixed 2x2 matrix."""

    def sigma0(x, i):
        r2 = np.sum((x - np.pi) ** 2, axis=-1)
        a = np.exp(-r2 / width)
        if modulate is not None:
            a = a * modulate(i)
        s = np.zeros(x.shape[:-1] + (2, 2), complex)
        s[..., 0, 0] = diag[0] * a
        s[..., 1, 1] = diag[1] * a
        s[..., 0, 1] = s[..., 1, 0] = offdiag * a
        return s

    return sigma0


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
