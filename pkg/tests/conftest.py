# criterion number -> (passed, detail, per-seed lines); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, list[str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail, lines = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
        for line in lines:
            terminalreporter.write_line(f"    {line}")
