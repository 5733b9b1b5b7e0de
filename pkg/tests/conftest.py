"""Prints one PASS/FAIL line per acceptance criterion after the run."""

_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    ok = report.passed if report.when == "call" else not report.failed
    prev = _criteria.get(key, (True, ""))
    _criteria[key] = (prev[0] and ok, props.get("detail", prev[1]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_criteria):
        ok, detail = _criteria[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")
