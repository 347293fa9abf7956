import pytest

CRITERIA = {
    1: "worked grouping example matches golden tables and covers",
    2: "grouping DP equals brute force on random instances",
    3: "grouping wall time is linear in N",
    4: "end-to-end SVM beats the seen-IP baseline on synthetic data",
    5: "weighted AUC matches the pairwise oracle",
    6: "subgradient matches finite differences; epoch objective is monotone",
    7: "CLI stages are bitwise deterministic",
    8: "importance, class weights and breadth features are conserved",
    9: "synthetic deny and scanner proportions are calibrated",
}

_outcomes: dict[int, str] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if rep.failed:
        _outcomes[n] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _outcomes.setdefault(n, "PASS")


@pytest.fixture
def note(request):
    marker = request.node.get_closest_marker("acceptance")

    def add(text: str) -> None:
        _notes.setdefault(marker.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, desc in CRITERIA.items():
        status = _outcomes.get(n, "NOT RUN")
        extra = "; ".join(_notes.get(n, []))
        terminalreporter.write_line(f"ACCEPTANCE {n} {status}: {desc}" + (f" [{extra}]" if extra else ""))
