import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per exit criterion of the acceptance suite
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1]
    if report.failed or (report.when == "call" and name not in _CRITERIA):
        _CRITERIA[name] = "PASS" if report.passed else "FAIL"
    elif report.skipped:
        _CRITERIA[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(number):2d}  {_CRITERIA[name]}  "
                                    f"{label.replace('_', ' ')}")
