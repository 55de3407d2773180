import pytest

_VERDICTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    if rep.skipped:
        status, detail = "BLOCKED", str(rep.longrepr[2]) if isinstance(rep.longrepr, tuple) else ""
        detail = detail.removeprefix("Skipped: ")
    else:
        status = "PASS" if rep.passed else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
    previous = _VERDICTS.get(number)
    if previous is not None:
        rank = {"FAIL": 2, "BLOCKED": 1, "PASS": 0}
        status = max(status, previous[0], key=rank.get)
        detail = " | ".join(d for d in (previous[2], detail) if d)
    _VERDICTS[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        status, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f": {detail}" if detail else ""))
