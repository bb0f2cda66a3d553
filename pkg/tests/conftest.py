import os

import pytest
from hypothesis import settings

from httpsync.sync import SyncKey

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def key() -> SyncKey:
    return SyncKey(bytes(range(32)))


@pytest.fixture
def key_file(tmp_path, key) -> str:
    path = tmp_path / "sync.key"
    path.write_text(key.to_hex() + "\n")
    os.chmod(path, 0o600)
    return str(path)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
