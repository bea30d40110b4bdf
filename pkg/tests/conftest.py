import numpy as np
import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "results": {}})
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if failed or item.name not in entry["results"]:
        entry["results"][item.name] = entry["results"].get(item.name, True) and not failed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        results = entry["results"]
        ok = all(results.values())
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {entry['title']}"
        if len(results) > 1:
            line += "  [" + ", ".join(f"{name}: {'pass' if r else 'FAIL'}" for name, r in results.items()) + "]"
        tr.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TWO_STATE = np.array([[0.9, 0.1], [0.2, 0.8]])
THREE_STATE = np.array([[0.8, 0.15, 0.05], [0.1, 0.7, 0.2], [0.05, 0.25, 0.7]])
