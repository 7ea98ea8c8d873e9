import numpy as np
import pytest

from ntdrecon.mesh import Ellipsoid, build_ball_mesh, build_box_mesh, tag_inclusion

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def box4():
    return build_box_mesh((1.0, 1.0, 1.0), 4)


@pytest.fixture(scope="session")
def box_incl():
    return tag_inclusion(build_box_mesh((1.0, 1.0, 1.0), 8), Ellipsoid.sphere((0.5, 0.5, 0.5), 0.25))


@pytest.fixture(scope="session")
def ball3():
    return build_ball_mesh(1.0, 3)


@pytest.fixture(scope="session")
def ball4_incl():
    return tag_inclusion(build_ball_mesh(1.0, 4), Ellipsoid.sphere((0.0, 0.0, 0.0), 0.5))
