import contextlib

import numpy as np
import pytest

from margin_engine.prices import SyntheticSpec, generate_synthetic

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion as PASS or FAIL."""

    @contextlib.contextmanager
    def record(name: str, detail: str = ""):
        info = {"detail": detail}
        try:
            yield info
        except BaseException:
            _CRITERIA.append((name, False, info["detail"]))
            raise
        _CRITERIA.append((name, True, info["detail"]))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def walk_1030():
    return generate_synthetic(SyntheticSpec(1030, 10.0, ((0.99, 0.5), (1.01, 0.5)), seed=7))
