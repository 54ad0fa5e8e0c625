CRITERIA = {
    1: "relation oracle suite",
    2: "figure pair",
    3: "geometry properties",
    4: "end-to-end gradients",
    5: "mask contracts",
    6: "overfit",
    7: "directional T2T ablation",
    8: "positional-encoding harness",
    9: "metric goldens",
    10: "determinism",
}
_outcomes: dict[int, str] = {}
_criterion_of: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    num = _criterion_of.get(report.nodeid)
    if num is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _outcomes.get(num)
        if prev != "FAIL":
            _outcomes[num] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criterion_of[item.nodeid] = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num, name in CRITERIA.items():
        terminalreporter.write_line(f"criterion {num:>2} {name}: {_outcomes.get(num, 'NOT RUN')}")
