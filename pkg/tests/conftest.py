import numpy as np
import pytest

from saviorrec.synthgen import InteractionLog, SynthConfig, generate_world

SMALL = dict(n_items=300, n_users=60, n_impressions=8000, n_rounds=100, session_window=20)


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(**SMALL)


@pytest.fixture(scope="session")
def small_world(small_config):
    return generate_world(small_config, seed=7)


def make_log(rows, n_items=20, n_rounds=10, n_max=4):
    """InteractionLog from (user, item, clicked, round) tuples; sequences left empty."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    n = len(rows)
    return InteractionLog(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], np.full(n, 0.5), np.full(n, 0.5),
                          np.full((n, n_max), -1, dtype=np.int64), n_items, n_rounds)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
