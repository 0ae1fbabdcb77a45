ACCEPTANCE_KEY = "_acceptance_results"


def pytest_configure(config):
    setattr(config, ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, ACCEPTANCE_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
