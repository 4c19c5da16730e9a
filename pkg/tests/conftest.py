"""Shared pytest plumbing.

The acceptance module collects one verdict line per criterion; echo them in
the terminal summary so they are visible even with output capture on.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        lines = getattr(mod, "REPORT", None) if mod else None
        if lines:
            terminalreporter.section("acceptance criteria")
            for line in lines:
                terminalreporter.write_line(line)
            break
