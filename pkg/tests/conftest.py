import numpy as np
import pytest

from utvi.training import RegressionSource, TrainConfig, build_regression_model, train

VERDICTS = pytest.StashKey[dict]()
ACCEPTANCE_IDS = range(1, 12)


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    store = request.config.stash[VERDICTS]

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[VERDICTS]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_IDS:
        terminalreporter.write_line(store.get(n, f"criterion {n:>2}: NOT RUN or errored before a verdict"))


@pytest.fixture(scope="session")
def trained_regression():
    """One UTVI regression model at desk scale (about a minute on one core)."""
    model = build_regression_model()
    res = train(model, RegressionSource(), TrainConfig(mode="utvi", seed=0, record_wall_time=False))
    return res.best.model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
