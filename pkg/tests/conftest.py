import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    rep = outcome.get_result()
    entry = _RESULTS.setdefault(item.nodeid, {"marker": marker, "seconds": 0.0, "ok": True, "props": []})
    entry["seconds"] += rep.duration
    entry["ok"] = entry["ok"] and not rep.failed
    entry["props"] = list(item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for entry in sorted(_RESULTS.values(), key=lambda e: e["marker"].args[0]):
        number, title, tolerance, budget = entry["marker"].args
        secs = entry["seconds"]
        timing = f"{secs:.2f}s/{budget:g}s" + (" over budget" if secs > budget else "")
        detail = "; ".join(f"{k}={v}" for k, v in entry["props"])
        tr.write_line(f"[{'PASS' if entry['ok'] else 'FAIL'}] {number:>2}. {title} | tol {tolerance} | {timing}"
                      + (f" | {detail}" if detail else ""))
