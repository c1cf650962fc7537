import pytest

_RESULTS_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run report."""
    results = request.config.stash.setdefault(_RESULTS_KEY, {})

    class Recorder:
        def __init__(self):
            self.number = None
            self.title = ""
            self.details: list[str] = []

        def __call__(self, number: int, title: str):
            self.number, self.title = number, title
            return self

        def note(self, text: str):
            self.details.append(text)

    rec = Recorder()
    yield rec
    if rec.number is not None:
        failed = request.node.stash.get(_FAILED_KEY, True)
        results[rec.number] = (rec.title, not failed, rec.details)


_FAILED_KEY = pytest.StashKey[bool]()


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if report.when == "call":
        item.stash[_FAILED_KEY] = report.failed
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, details = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
        for d in details:
            terminalreporter.write_line(f"    {d}")
