import pytest

_LINES = []


class Criterion:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __init__(self, number, title):
        self.number, self.title = number, title

    def check(self, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number:>2}: {self.title}  {detail}".rstrip()
        _LINES.append(line)
        print(line)
        assert ok, line


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
