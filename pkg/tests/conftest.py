import pytest

_OUTCOMES = {}


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False,
                     help="also run the slow Langevin ensemble tier")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="slow tier; pass --slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "outcomes": []})
    if call.when == "setup" and call.excinfo is not None:
        entry["outcomes"].append("SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL")
    elif call.when == "call":
        entry["outcomes"].append("PASS" if call.excinfo is None else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        entry = _OUTCOMES[number]
        outs = entry["outcomes"]
        if "FAIL" in outs:
            status = "FAIL"
        elif outs and all(o == "SKIP" for o in outs):
            status = "SKIP"
        elif "PASS" in outs:
            status = "PASS"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"criterion {number:>2}: {status:<4}  {entry['title']}")
