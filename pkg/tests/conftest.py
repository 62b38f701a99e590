import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance test, with whatever it recorded via ``record_property``."""
    status, notes = {}, {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if outcome == "passed" and rep.when == "call":
                status.setdefault(name, "PASS")
            elif outcome != "passed":
                status[name] = "FAIL" if outcome != "skipped" else "SKIP"
            props = dict(getattr(rep, "user_properties", []))
            if props:
                notes[name] = " ".join(f"{k}={v}" for k, v in props.items())
    if status:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(status, key=lambda n: int(n.split("_")[2])):
            terminalreporter.write_line(f"{status[name]}  {name}  {notes.get(name, '')}".rstrip())
