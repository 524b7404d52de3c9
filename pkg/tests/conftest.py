import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "shape/alignment suite",
    2: "gradient audit",
    3: "sinkhorn marginals",
    4: "moe routing and aux loss",
    5: "schedules and ema replay",
    6: "loss oracles",
    7: "toy pretrain smoke test",
    8: "file roundtrip and corruption codes",
    9: "attention dumps",
}

_outcomes: dict[int, list[str]] = {}
_notes: dict[int, list[str]] = {}


@pytest.fixture
def criterion_note(request):
    """Attach measured numbers to the acceptance summary line."""
    number = request.node.get_closest_marker("criterion").args[0]

    def note(text: str) -> None:
        _notes.setdefault(number, []).append(text)

    return note


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = report.user_properties and dict(report.user_properties).get("criterion")
    if number:
        _outcomes.setdefault(number, []).append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        elif any(r == "failed" for r in results):
            status = "FAIL"
        else:
            status = "SKIP"
        extra = "; ".join(_notes.get(n, []))
        terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {status}" + (f" [{extra}]" if extra else ""))
