import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmg_ems.distributed import run_distributed  # noqa: E402
from mmg_ems.scenarios import builtin_case  # noqa: E402

CRITERIA = {}


@pytest.fixture(scope="session")
def base_case():
    return builtin_case("base")


@pytest.fixture(scope="session")
def stressed_case():
    return builtin_case("stressed")


@pytest.fixture(scope="session")
def coop_case():
    return builtin_case("individual_vs_coop")


@pytest.fixture(scope="session")
def base_run(base_case):
    return run_distributed(base_case)


@pytest.fixture(scope="session")
def stressed_run(stressed_case):
    return run_distributed(stressed_case)


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion under ``number``."""
    number = request.node.get_closest_marker("criterion").args[0]
    CRITERIA.setdefault(number, []).append(request.node)
    return number


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


_outcomes = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or report.failed:
        prev = _outcomes.get(report.nodeid, True)
        _outcomes[report.nodeid] = prev and report.passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        nodes = CRITERIA[number]
        ok = all(_outcomes.get(n.nodeid, False) for n in nodes)
        names = ", ".join(n.name for n in nodes)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  ({names})")
