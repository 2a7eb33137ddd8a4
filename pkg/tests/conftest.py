import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = {}


@pytest.fixture
def p2():
    from families import P2
    return P2.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = (report.outcome, report.sections)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split("_")[1]) if s.split("_")[1].isdigit() else 99):
        outcome, sections = _ACCEPTANCE[name]
        detail = ""
        for title, text in sections:
            if "stdout" in title:
                lines = [ln for ln in text.splitlines() if ln.strip()]
                if lines:
                    detail = lines[-1]
        tag = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"{tag}  {name}  {detail}")
