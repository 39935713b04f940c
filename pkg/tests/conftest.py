"""Collects one summary line per acceptance criterion.

Tests carry ``@pytest.mark.acceptance(n)``; outcomes of all tests sharing a
criterion number are folded into a single PASS/FAIL/SKIP line printed at the
end of the session.
"""
import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    # the call phase decides, unless setup already failed or skipped
    if report.when == "call" or (report.when == "setup" and not report.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            details.append(reason.removeprefix("Skipped: "))
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        results = item.config.stash.setdefault(_RESULTS, {})
        results.setdefault(marker.args[0], []).append((item.name, status, details))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entries = results[number]
        statuses = {status for _, status, _ in entries}
        if "FAIL" in statuses:
            verdict = "FAIL"
        elif statuses == {"SKIP"}:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        notes = []
        for name, status, details in entries:
            text = "; ".join(details)
            if status != "PASS":
                text = f"{name} {status.lower()}: {text}"
            if text:
                notes.append(text)
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {' | '.join(notes)}")
