from pathlib import Path

import pytest

from smoke_runs import smoke_runner

# criterion number -> (title, list of part outcomes)
CRITERIA: dict[int, tuple[str, list[bool]]] = {}
DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test covers")


@pytest.fixture(scope="session")
def smoke(request):
    """``seed -> SmokeRun``: five-plus smoke-scale models per seed, checkpoints cached in .pytest_cache."""
    return smoke_runner(Path(request.config.cache.mkdir("smoke_checkpoints")))


@pytest.fixture
def note(request):
    """Record a measurement line shown under the test's criterion in the summary."""
    mark = request.node.get_closest_marker("criterion")
    number = mark.args[0] if mark else 0

    def record(line: str):
        print(line)
        DETAILS.setdefault(number, []).append(line)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        CRITERIA.setdefault(number, (title, []))[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, parts = CRITERIA[number]
        verdict = "PASS" if all(parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title} ({sum(parts)}/{len(parts)} parts)")
        for line in DETAILS.get(number, []):
            terminalreporter.write_line(f"    {line}")
