import sys
from pathlib import Path

# Make the sibling test-support modules importable regardless of rootdir.
sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        mark = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{mark}  {name}: {detail}")
