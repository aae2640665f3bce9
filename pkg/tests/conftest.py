import numpy as np
import pytest

from glam import tensor as T

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def record_acceptance(number: int, name: str, status: str, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n}. {name}" + (f": {detail}" if detail else ""))
