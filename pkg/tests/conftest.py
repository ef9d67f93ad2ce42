import pytest

from moesim.core import load_preset

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def mixtral():
    return load_preset("mixtral-8x7b")


@pytest.fixture(scope="session")
def phi():
    return load_preset("phi3.5-moe")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE.append((props["criterion"], report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, outcome, detail in sorted(_ACCEPTANCE, key=lambda x: x[0]):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {crit}: {status}  {detail}")
