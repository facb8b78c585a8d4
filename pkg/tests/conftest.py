import numpy as np
import pytest

from latentweights.data import ItemResponseMatrix


def simulate_2pl(rng, N, beta0, beta1, theta=None):
    beta0 = np.asarray(beta0, dtype=float)
    beta1 = np.asarray(beta1, dtype=float)
    theta = rng.standard_normal(N) if theta is None else theta
    prob = 1.0 / (1.0 + np.exp(-(beta0[None, :] + beta1[None, :] * theta[:, None])))
    return ItemResponseMatrix((rng.random(prob.shape) < prob).astype(np.int8)), theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    status = passed if isinstance(passed, str) else "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
