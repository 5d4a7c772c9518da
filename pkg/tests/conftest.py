from __future__ import annotations

import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


class Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} acceptance {number}: {title} ({detail})"
        print(line)
        _ACCEPTANCE.append((number, title, ok, detail))


@pytest.fixture(scope="session")
def acceptance() -> Recorder:
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} acceptance {number}: {title} ({detail})")
