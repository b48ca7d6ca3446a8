"""Per-criterion pass/fail summary for the acceptance suite."""
import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    failed = rep.failed or (rep.skipped and hasattr(rep, "wasxfail"))
    if rep.when == "call" or failed:
        prev = _RESULTS.get(number)
        ok = not failed and (prev is None or prev[0])
        notes = [v for k, v in item.user_properties if k == "measured"]
        _RESULTS[number] = (ok, text, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, text, notes = _RESULTS[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
