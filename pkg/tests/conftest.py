import json
from pathlib import Path

import pytest

from activedrv.driver import load_driver, lower
from activedrv.protocol import load_protocol

FIXTURES = Path(__file__).parent / "fixtures"
MUTANTS = FIXTURES / "mutants"


def power_mgmt():
    return load_protocol(FIXTURES / "power_mgmt.prot")


def load_cfg(name, protocols=None):
    protocols = [power_mgmt()] if protocols is None else protocols
    path = Path(name) if Path(name).is_absolute() else FIXTURES / name
    return lower(load_driver(path, protocols))


def mutant_index():
    return json.loads((MUTANTS / "index.json").read_text())


def corpus_paths():
    return sorted(FIXTURES.glob("*.drv")) + sorted(MUTANTS.glob("*.drv"))


@pytest.fixture
def pm():
    return power_mgmt()


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
