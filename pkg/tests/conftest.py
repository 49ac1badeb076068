import pytest

_ACCEPTANCE: list[tuple[str, str, str]] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name
        self.done = False

    def report(self, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((self.name, "PASS" if passed else "FAIL", detail))
        self.done = True
        print(f"[{'PASS' if passed else 'FAIL'}] {self.name}: {detail}")
        return passed

    def skip(self, reason: str) -> None:
        _ACCEPTANCE.append((self.name, "SKIP", reason))
        self.done = True
        pytest.skip(reason)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(marker.args[0] if marker else request.node.name)
    yield c
    if not c.done:
        _ACCEPTANCE.append((c.name, "FAIL", "did not complete"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status:4s}  {name}: {detail}")
