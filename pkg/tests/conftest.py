import numpy as np
import pytest

from hmcf.geometry import make_geometry

# (criterion number, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


BUILTINS = ["euclidean(2)", "euclidean(3)", "heisenberg(1)", "heisenberg(2)", "grusin", "rototranslation"]


@pytest.fixture(params=BUILTINS)
def builtin_frame(request):
    return make_geometry(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
