import numpy as np
import pytest

_CRITERIA: dict[int, list] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    entry = _CRITERIA.setdefault(mark.args[0], [item.name, "PASS", ""])
    if rep.failed:
        entry[1] = "FAIL"
    detail = dict(item.user_properties).get("detail")
    if detail and detail not in entry[2]:
        entry[2] = f"{entry[2]} | {detail}" if entry[2] else detail


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {name}  {detail}".rstrip())
