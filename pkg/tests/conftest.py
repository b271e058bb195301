import pytest

import parad

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        _criteria.append((mark.args[0], status, mark.args[1], detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(_criteria):
        line = f"criterion {number}: {status} - {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)


@pytest.fixture
def session():
    with parad.session(wait_timeout=60):
        yield


@pytest.fixture
def recording(session):
    """Active tape installed on the calling thread."""
    tape = parad.tool.create_tape()
    parad.tool.set_thread_local_tape(tape)
    parad.tool.set_active(tape, True)
    yield tape
    parad.tool.set_active(tape, False)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to an acceptance criterion."""
    def add(text):
        request.node.user_properties.append(("detail", text))
        print(text)
    return add
