import numpy as np
import pytest
from hypothesis import settings

from fmflcm.fda import FunctionalDataset

ACCEPTANCE_LINES = pytest.StashKey[list]()

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_dataset(n=12, p=3, S=5, seed=0, K=2, noise=0.3, irregular=False):
    """Small mixture of concurrent regressions with random smooth coefficients."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, K, size=n)
    coef = rng.normal(size=(K, p, 3))
    times, ys, xs = [], [], []
    for i in range(n):
        if irregular:
            t = np.sort(rng.choice(np.linspace(0, 1, S + 3), size=S, replace=False))
        else:
            t = np.linspace(0.0, 1.0, S)
        x = rng.normal(size=(S, p))
        basis = np.stack([np.ones_like(t), t, t * t], axis=1)
        beta = basis @ coef[labels[i]].T
        y = np.sum(x * beta, axis=1) + noise * rng.normal(size=S)
        times.append(t)
        ys.append(y)
        xs.append(x)
    return FunctionalDataset.from_arrays(times, ys, xs), labels


@pytest.fixture
def small_data():
    return random_dataset()


@pytest.fixture
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, []).append


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
