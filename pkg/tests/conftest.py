import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results):
        ok, name, detail = results[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {name} -- {detail}")
