import time

import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Collects one PASS/FAIL line per acceptance criterion, runtime included."""

    def __init__(self, label: str):
        self.label = label
        self.started = time.perf_counter()

    def finish(self, ok: bool, detail: str, limit: float = None) -> None:
        elapsed = time.perf_counter() - self.started
        within = limit is None or elapsed < limit
        budget = f" (limit {limit:.0f} s)" if limit is not None else ""
        line = f"{'PASS' if ok and within else 'FAIL'} {self.label}: {detail}; {elapsed:.1f} s{budget}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
        assert within, f"{self.label} took {elapsed:.1f} s, limit {limit:.0f} s"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return Criterion(marker.args[0] if marker else request.node.name)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
