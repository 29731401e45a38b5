import pytest

ACCEPTANCE = {}


class CriterionReporter:
    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE[number] = line
        with self.capsys.disabled():
            print("\n" + line)
        assert passed, line


@pytest.fixture
def criterion(capsys):
    return CriterionReporter(capsys)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
