import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def machine():
    from offloadsim.machine import Machine, MachineConfig

    m = Machine(MachineConfig(device_capacity=8 << 20, host_capacity=4 << 20))
    m.start()
    yield m
    m.stop()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}")
