import numpy as np
import pytest

from stablerepr.linalg import WeightedSpace
from stablerepr.mdp import Mdp, PolicyMatrix, floor_distribution, fourroom_task


def random_chain(rng, n, sharpness=1):
    """Row-stochastic matrix; larger ``sharpness`` concentrates rows."""
    p = rng.random((n, n)) ** sharpness
    return p / p.sum(axis=1, keepdims=True)


def random_xi(rng, n, alpha=1.0):
    return floor_distribution(np.maximum(rng.dirichlet(np.full(n, alpha)), 1e-4))


def random_instance(rng, n, sharpness=1, alpha=1.0):
    """``(PolicyMatrix, WeightedSpace)`` on an abstract chain of ``n`` pairs."""
    p = random_chain(rng, n, sharpness)
    return PolicyMatrix(p, np.ones((n, 1))), WeightedSpace(random_xi(rng, n, alpha))


def random_mdp(rng, n_states, n_actions, gamma=0.9):
    p = rng.random((n_states, n_actions, n_states)) ** 3
    p /= p.sum(axis=2, keepdims=True)
    return Mdp(p, rng.standard_normal(n_states * n_actions),
               np.full(n_states, 1.0 / n_states), gamma)


def stationary_of(p):
    w, v = np.linalg.eig(p.T)
    x = np.real(v[:, np.argmin(np.abs(w - 1))])
    return x / x.sum()


@pytest.fixture(scope="session")
def task():
    return fourroom_task()


@pytest.fixture(scope="session")
def task_exact():
    return fourroom_task(xi_source="exact")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
