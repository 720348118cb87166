import pytest
from hypothesis import settings

from ctqubits import dimer as dm, pulses
from ctqubits.spin_core import preset

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def params():
    return preset()


@pytest.fixture(scope="session")
def dimer():
    return dm.default_dimer()


@pytest.fixture(scope="session")
def block(dimer):
    return pulses.block_system(dimer)


@pytest.fixture(scope="session")
def monomers(dimer):
    return pulses.block_system(dimer.uncoupled())


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
