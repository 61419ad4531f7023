import numpy as np
import pytest

_ACCEPTANCE: dict[int, str] = {}


def pytest_addoption(parser):
    parser.addoption("--kitti-dir", default=None,
                     help="KITTI depth-selection validation tree for the optional integration check")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line (``ok=None`` for a skip)."""

    def record(n: int, ok: bool | None, detail: str) -> bool | None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {n:>2}: {status}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
