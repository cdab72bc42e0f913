import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request, capsys):
    """Record one pass/fail line per acceptance criterion; the lines are
    printed as the test runs and again in the terminal summary."""
    state = {}

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        state["line"] = line
        request.config.stash[ACCEPTANCE].append((number, line))
        with capsys.disabled():
            print(f"\n  {line}")
        return ok

    yield report
    if "line" not in state:
        number = int(request.node.name.split("_")[1][1:])
        request.config.stash[ACCEPTANCE].append((number, f"criterion {number:2d}: FAIL  (error before a verdict)"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
