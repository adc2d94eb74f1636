import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from premir.gateway import ModelGateway, ProviderConfig  # noqa: E402

_acceptance = {}


@pytest.fixture
def mock_gateway():
    return ModelGateway(ProviderConfig(embed_dimension=256))


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when not in ("setup", "call"):
        return
    number = marker.args[0]
    title = marker.kwargs.get("title", item.name)
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    prev = _acceptance.get(number, (title, True))
    _acceptance[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok = _acceptance[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}")
