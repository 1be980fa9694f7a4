from collections import defaultdict

CRITERIA = {
    1: "end-to-end lifecycle through the owner CLI",
    2: "reference sclib client and server exchange greetings",
    3: "every modeled attack is blocked",
    4: "sealed-image and verity oracles",
    5: "simnet determinism across seeds",
    6: "canonical-form idempotence",
}

_criterion_of = {}
_outcomes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test decides")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _criterion_of[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _outcomes[n].append((report.nodeid, report.passed and not report.skipped))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n, [])
        if not results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  {title}")
            continue
        passed = sum(ok for _, ok in results)
        verdict = "PASS" if passed == len(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title} ({passed}/{len(results)} checks)")
