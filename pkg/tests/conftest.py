import pytest

_VERDICTS: dict[int, tuple[str, str]] = {}


class Verdict:
    """Records one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int):
        self.number = number
        self.notes: list[str] = []

    def note(self, text: str):
        self.notes.append(text)

    def check(self, ok: bool, summary: str):
        status = "PASS" if ok else "FAIL"
        detail = summary + ("; " + "; ".join(self.notes) if self.notes else "")
        _VERDICTS[self.number] = (status, detail)
        assert ok, f"criterion {self.number}: {detail}"


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("criterion")
    return Verdict(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
