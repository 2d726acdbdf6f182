"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _OUTCOMES[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_OUTCOMES.items()):
        name = nodeid.split("::")[-1].removeprefix("test_")
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{word}  {name}" + (f"  [{detail}]" if detail else ""))
