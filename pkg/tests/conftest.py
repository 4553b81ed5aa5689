import numpy as np
import pytest

from instrseg.data import generate_synthetic


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running; enabled with --runslow")
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")
    config.stash[ACCEPTANCE] = {}


ACCEPTANCE = pytest.StashKey()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (report.when == "call" or not report.passed):
        number, title = marker.args
        item.config.stash[ACCEPTANCE].setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcomes = results[number]
        if "failed" in outcomes:
            status = "FAIL"
        elif "passed" in outcomes:
            status = "PASS"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(root, count=8, size=(128, 160), seed=7)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
