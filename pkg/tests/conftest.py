import numpy as np
import pytest

from dgqn.network import builtin_grid2x2, builtin_seoul15, grid_network

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    n, title = marks
    entry = _CRITERIA.setdefault(n, {"title": title, "results": [], "details": []})
    outcome = "xfail" if hasattr(report, "wasxfail") else report.outcome
    entry["results"].append(outcome)
    entry["details"].extend(v for k, v in report.user_properties if k == "detail")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = (mark.args[0], mark.args[1] if len(mark.args) > 1 else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        results = entry["results"]
        if all(r == "passed" for r in results):
            status = "PASS"
        elif any(r == "xfail" for r in results) and all(r in ("passed", "xfail") for r in results):
            status = "FAIL (expected, see notes)"
        elif all(r == "skipped" for r in results):
            status = "SKIPPED"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status:<28} {entry['title']}")
        for line in entry["details"]:
            terminalreporter.write_line(f"    {line}")


@pytest.fixture(scope="session")
def seoul15():
    return builtin_seoul15()


@pytest.fixture(scope="session")
def grid2x2():
    return builtin_grid2x2()


@pytest.fixture(scope="session")
def toy2():
    """Two intersections side by side, two phases each."""
    return grid_network(1, 2, demand_vph=400)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
