import numpy as np
import pytest


def random_spd(rng, p, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    vals = np.exp(rng.uniform(0, np.log(cond), p))
    return (q * vals) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Remember one acceptance verdict for the end-of-run summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
