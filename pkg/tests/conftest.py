"""Shared pytest plumbing: the acceptance criteria report one line each at the end of the run."""

CRITERIA_RESULTS = {}


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    CRITERIA_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_RESULTS):
        terminalreporter.write_line(CRITERIA_RESULTS[number])
