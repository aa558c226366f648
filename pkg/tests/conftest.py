import numpy as np
import pytest
from hypothesis import settings

from hybrid_ddf.gaussian import GaussianDensity, object_key, robot_key

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_density(rng, keys, scale=1.0, pd=True):
    """Random information-form density over ``keys``."""
    n = 3 * len(keys)
    a = rng.normal(size=(n, n))
    info = a @ a.T + (n * 0.5 if pd else 0.0) * np.eye(n)
    vec = rng.normal(size=n) * scale
    points = np.column_stack([rng.uniform(-5, 5, (len(keys), 2)), rng.uniform(-3, 3, len(keys))])
    return GaussianDensity(keys, info, vec, points)


def key_pool(n):
    return [robot_key(1, i) for i in range(n // 2)] + [object_key(i) for i in range(n - n // 2)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria record one line each; they are printed at the end of
# the session so they show up in plain ``pytest -v`` output.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
