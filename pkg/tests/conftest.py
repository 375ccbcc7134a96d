import numpy as np
import pytest

from sesorec.data import SocialGraph
from sesorec.ring import FixedPointConfig
from sesorec.sharing import MaskSource


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cfg():
    return FixedPointConfig(64, 20)


@pytest.fixture
def masks():
    return MaskSource(seed=2024)


def random_ring(rng, shape, bits=64):
    hi = np.iinfo(np.uint64).max if bits == 64 else (1 << bits) - 1
    return rng.integers(0, hi, size=shape, dtype=np.uint64, endpoint=True)


def bigint_matmul(a, b, bits=64):
    """Exact ring product through Python integers."""
    a = [[int(v) for v in row] for row in np.asarray(a)]
    b = [[int(v) for v in row] for row in np.asarray(b)]
    mod = 1 << bits
    out = [[sum(a[i][t] * b[t][j] for t in range(len(b))) % mod for j in range(len(b[0]))] for i in range(len(a))]
    return np.array(out, dtype=np.uint64).reshape(len(a), len(b[0]) if b else 0)


def toy_instance(seed=0, n_users=8, n_items=10, n_ratings=30, n_edges=12):
    """Small rating set plus a random simple social graph."""
    r = np.random.default_rng(seed)
    pairs = r.choice(n_users * n_items, n_ratings, replace=False)
    users, items = pairs // n_items, pairs % n_items
    ratings = r.integers(1, 6, n_ratings).astype(float)
    edges = set()
    while len(edges) < n_edges:
        a, b = r.choice(n_users, 2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    return (users, items, ratings), SocialGraph.from_edges(n_users, sorted(edges))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
