import numpy as np
import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}
    # every subproblem solve asserts its KKT conditions during the tests
    import sldac.actor
    sldac.actor.CHECK_KKT = True


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion(request):
    """Record ``(number, passed, detail)`` for the acceptance summary and echo it live."""
    results = request.config.stash[_ACCEPTANCE_KEY]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
