"""Shared pytest hooks: acceptance results are collected and summarized at the end."""

ACCEPTANCE_RESULTS: dict = {}


def record_acceptance(key: str, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {key} {title}: {detail}"
    ACCEPTANCE_RESULTS[key] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
