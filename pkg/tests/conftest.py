import numpy as np
import pytest
from hypothesis import settings

from unfoldreg.linops import MaskedDFT, random_2d_mask
from unfoldreg.manifold import SyntheticManifold

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def op16():
    return MaskedDFT(random_2d_mask((16, 16), 0.25, seed=0))


@pytest.fixture
def manifold16():
    return SyntheticManifold.create((16, 16), 6, lo=-10.0, hi=10.0)


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Print and remember one acceptance line; the summary repeats them in order."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
