import sqlite3

import pytest

from semlayer import fixtures
from semlayer.llm_gateway import Gateway, ProviderConfig, ReplayProvider, ScriptedTranscript


@pytest.fixture
def staff_orders_db():
    db = fixtures.staff_orders_database()
    yield db
    db.close()


@pytest.fixture
def staff_orders_snapshot():
    return fixtures.staff_orders_snapshot()


@pytest.fixture
def braze_db():
    db = fixtures.braze_database()
    yield db
    db.close()


@pytest.fixture
def memdb():
    db = sqlite3.connect(":memory:", isolation_level=None)
    yield db
    db.close()


def replay_gateway(path) -> Gateway:
    return Gateway.from_config(ProviderConfig(kind="replay", transcript_path=str(path)))


def scripted(turns) -> Gateway:
    return Gateway(ReplayProvider(ScriptedTranscript(list(turns))))


# -- one summary line per acceptance criterion

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): test that decides one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[item.nodeid] = (label, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in _criteria.values():
        terminalreporter.write_line(f"{verdict}  {label}")
