import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion in the terminal summary
# ---------------------------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry["notes"].append(f"{item.name}: {msg.splitlines()[0]}")
    for key, value in item.user_properties:
        if key == "measured":
            entry["notes"].append(f"{item.name}: {value}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        terminalreporter.write_line(f"CRITERION {number} {'PASS' if entry['ok'] else 'FAIL'}: {entry['title']}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
