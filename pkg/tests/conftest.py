import numpy as np
import pytest

from cooploc import sensing, world

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def central_difference(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of scalar f w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f()
        flat[j] = orig - step
        fm = f()
        flat[j] = orig
        gf[j] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def small_traces():
    net = world.generate_grid_network(6, 6, 150.0, 14.0)
    return world.simulate_traces(net, 30, 120.0, 1.0, seed=11)


@pytest.fixture(scope="session")
def default_noise():
    return sensing.NoiseConfig()


@pytest.fixture(scope="session")
def sample_episode(small_traces, default_noise):
    return sensing.make_episode(small_traces, 6, 20, default_noise, seed=7)
