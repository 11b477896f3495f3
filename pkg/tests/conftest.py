import numpy as np
import pytest

from mango_attack import _kernels
from mango_attack.harness import TaskSpec, build_task


@pytest.fixture(scope="session", autouse=True)
def _jit_warmup():
    # compile kernels once so per-test timings measure the algorithms, not numba
    _kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_task():
    return build_task(TaskSpec())


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(name, passed, detail, seconds):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({seconds:.1f}s)")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
