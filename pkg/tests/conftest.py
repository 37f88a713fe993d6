import numpy as np
import pytest

from ifsem.geometry import Similitude, random_rotation
from ifsem.model import IfsModel

ACCEPTANCE_LINES = []


def random_model(rng, K, D, H, scale=(0.3, 0.7), spread=1.0, post=True):
    """A random IFS with strictly positive weights."""
    comps = [Similitude(rng.uniform(*scale), random_rotation(H, rng),
                        rng.uniform(-spread, spread, H)) for _ in range(K)]
    w = rng.dirichlet(np.full(K, 2.0))
    v = rng.dirichlet(np.full(D + 1, 2.0))
    if post:
        f_p = Similitude(rng.uniform(0.7, 1.5), random_rotation(H, rng), rng.normal(0, 0.5, H))
    else:
        f_p = Similitude.identity(H)
    return IfsModel(comps, w, v, f_p)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
