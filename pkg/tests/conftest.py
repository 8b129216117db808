import numpy as np
import pytest

from diffmamba import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    """Run a test once per available scan backend."""
    previous = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def emit(request):
    """Print one acceptance line straight to the terminal and keep it for the summary."""
    config = request.config
    capman = config.pluginmanager.getplugin("capturemanager")
    reporter = config.pluginmanager.getplugin("terminalreporter")

    def _emit(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        config.stash.setdefault(CRITERIA, {})[n] = line
        with capman.global_and_fixture_disabled():
            reporter.write_line("")
            reporter.write_line(line)

    return _emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
