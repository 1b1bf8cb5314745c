"""Shared fixtures and the acceptance summary printed at the end of a run."""

import pytest

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def measured(request):
    """Collects ``name=value`` notes shown next to the criterion's pass/fail line."""
    notes: list[str] = []
    request.node.user_properties.append(("measured", notes))
    return lambda **kw: notes.extend(f"{k}={_short(v)}" for k, v in kw.items())


def _short(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False, "notes": []})
    if rep.when == "call" or rep.failed:
        entry["ran"] = True
        entry["passed"] = entry["passed"] and rep.passed
    if rep.when == "call":
        for key, notes in item.user_properties:
            if key == "measured":
                entry["notes"].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["ran"] and e["passed"] else ("FAIL" if e["ran"] else "NOT RUN")
        notes = f"  [{', '.join(e['notes'])}]" if e["notes"] else ""
        tr.write_line(f"criterion {number:2d} {status}: {e['title']}{notes}")
