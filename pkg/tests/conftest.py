import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", (mark.args[0], mark.args[1])))


_OUTCOMES: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    if report.when == "call" or report.outcome != "passed":
        prev = _OUTCOMES.get(number, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else (
            "SKIP" if report.outcome == "skipped" else "FAIL")
        _OUTCOMES[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, status = _OUTCOMES[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:2d} {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
