import pytest

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = getattr(item.function, "criterion", None)
    if name is None or report.when != "call":
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.failed:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
        ACCEPTANCE_RESULTS.append((name, False, msg))
    else:
        ACCEPTANCE_RESULTS.append((name, True, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
