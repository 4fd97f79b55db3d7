import pytest


def write_log(path, rows, header=True):
    """rows: (user, query, 'YYYY-MM-DD HH:MM:SS', rank or '', url or '')."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n")
        for r in rows:
            fh.write("\t".join(str(x) for x in r) + "\n")
    return path


@pytest.fixture
def log_writer(tmp_path):
    def make(rows, name="log.tsv", header=True):
        return write_log(tmp_path / name, rows, header)
    return make


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
