import pytest

_VERDICTS = pytest.StashKey[dict]()


class Verdicts:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        self.store[number] = line
        print(line)
        return ok


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdicts(request):
    return Verdicts(request.config.stash[_VERDICTS])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])
