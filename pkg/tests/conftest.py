import numpy as np
import pytest

from rcpo.cmdp import make_random_cmdp, random_policy

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion_report():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def report(number: int, name: str, passed: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])


@pytest.fixture
def small_cmdp():
    return make_random_cmdp(3, 4, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pair(seed: int, n_states: int, n_actions: int):
    cmdp = make_random_cmdp(seed, n_states, n_actions)
    rng = np.random.default_rng(seed + 1000)
    return cmdp, random_policy(rng, n_states, n_actions), rng
