import numpy as np
import pytest
from threadpoolctl import threadpool_limits

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    notes = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        notes = "; ".join(getattr(item, "_acceptance_notes", []))
        _CRITERIA[number] = (status, title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, notes = _CRITERIA[number]
        line = f"[{status}] criterion {number}: {title}"
        if notes:
            line += f" ({notes})"
        terminalreporter.write_line(line)
