from __future__ import annotations

import pytest

from avrrop.fixtures import demo_firmware, sentinel_malware
from avrrop.gadgets import scan_gadgets

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def demo_image():
    return demo_firmware()


@pytest.fixture(scope="session")
def demo_catalog(demo_image):
    return scan_gadgets(demo_image)


@pytest.fixture(scope="session")
def malware64():
    return sentinel_malware(64)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, msg = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {msg}")
