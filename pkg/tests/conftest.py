import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request, capsys):
    """Record one verdict line per acceptance criterion and echo it immediately."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def report(number, title, verdict, detail):
        line = f"[criterion {number:>2}] {verdict:<12} {title}: {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
