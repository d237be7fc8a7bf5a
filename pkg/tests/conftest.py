import pytest

from _corpus import FUTURES_YAML, MULTI_YAML

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def futures_config(tmp_path):
    path = tmp_path / "futures.yaml"
    path.write_text(FUTURES_YAML)
    return path


@pytest.fixture
def multi_config(tmp_path):
    path = tmp_path / "multi.yaml"
    path.write_text(MULTI_YAML)
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
