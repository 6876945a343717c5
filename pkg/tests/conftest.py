import pytest

from tsor.sim import Cluster

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def two_node():
    with Cluster("two-node") as cl:
        yield cl


@pytest.fixture
def ingress_demo():
    with Cluster("ingress-demo") as cl:
        yield cl
