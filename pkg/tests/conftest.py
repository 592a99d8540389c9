import contextlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from motionem.grid import GridSpec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid64():
    return GridSpec.square(64)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The body receives a dict; whatever it stores there is appended to the line.
    """
    lines = request.config.acceptance_lines

    @contextlib.contextmanager
    def record(label: str):
        info: dict = {}
        try:
            yield info
        except BaseException as exc:
            reason = (str(exc).strip().splitlines() or [type(exc).__name__])[0]
            line = f"FAIL {label} {_fmt(info)} :: {reason}"
            lines.append(line)
            print(line)
            raise
        line = f"PASS {label} {_fmt(info)}"
        lines.append(line)
        print(line)

    return record


def _fmt(info: dict) -> str:
    return " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
