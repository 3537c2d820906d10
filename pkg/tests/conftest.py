import pytest

_RESULTS = []


class Criterion:
    def __init__(self, name, capman):
        self.name = name
        self._capman = capman

    def note(self, text):
        self._emit(f"    {self.name}: {text}")

    def report(self, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}" + (f"  ({detail})" if detail else "")
        _RESULTS.append(line)
        self._emit(line)
        assert ok, line

    def _emit(self, line):
        if self._capman is None:
            print(line)
            return
        with self._capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)


@pytest.fixture
def criterion(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")
    return lambda name: Criterion(name, capman)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
