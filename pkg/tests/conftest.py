from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as detail:`` records one PASS/FAIL line for the summary.

    Put a short measurement summary in ``detail["text"]`` inside the block.
    """
    lines = request.config.stash[_LINES]

    @contextmanager
    def _record(number: int, title: str):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException as exc:
            msg = detail["text"] or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            lines.append((number, f"FAIL  criterion {number:>2}: {title} | {msg}"))
            raise
        lines.append((number, f"PASS  criterion {number:>2}: {title} | {detail['text']}"))

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
