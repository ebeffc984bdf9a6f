"""Collects acceptance outcomes and prints one line per criterion after the run."""

ACCEPTANCE = {}
CRITERIA = 12


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in range(1, CRITERIA + 1):
        if k in ACCEPTANCE:
            title, ok, detail = ACCEPTANCE[k]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d}: {title} | {detail}")
        else:
            tr.write_line(f"[FAIL] criterion {k:2d}: not run or errored before reporting")
