import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cnsbm.data import CategoricalMatrix

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def matrix(codes, mask=None, n_cat=None):
    codes = np.asarray(codes, dtype=np.int64)
    mask = np.ones(codes.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if n_cat is None:
        n_cat = max(2, int(codes[mask].max()) + 1)
    return CategoricalMatrix(codes, mask, n_cat)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_masked(rng):
    codes = rng.integers(0, 4, size=(9, 7))
    mask = rng.random((9, 7)) > 0.25
    mask[:, 0] = True
    mask[0, :] = True
    return CategoricalMatrix(codes, mask, 4)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
