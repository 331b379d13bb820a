import numpy as np
import pytest

from mfglab.geometry import ObstacleSpec, boundary_patch, build_grid
from mfglab.mfg import BoundaryRegime, RunningCost
from mfglab.parabolic import TimeGrid

CRITERIA_LINES = []

SQUARE_OBSTACLE = ObstacleSpec("rectangle", (0.5, 0.5), (0.125, 0.125))
THREE_EDGES = (("bottom", 0.0, 1.0), ("right", 0.0, 1.0), ("top", 0.0, 1.0))


def record_criterion(line: str):
    """Remember an acceptance line so the terminal summary shows it uncaptured."""
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def square():
    return build_grid((1.0, 1.0), (33, 33), None)


@pytest.fixture(scope="session")
def holed():
    return build_grid((1.0, 1.0), (33, 33), SQUARE_OBSTACLE)


@pytest.fixture(scope="session")
def small():
    return build_grid((1.0, 1.0), (17, 17), None)


@pytest.fixture(scope="session")
def small_holed():
    return build_grid((1.0, 1.0), (17, 17), ObstacleSpec("rectangle", (0.5, 0.5), (0.13, 0.13)))


@pytest.fixture(scope="session")
def tg():
    return TimeGrid(0.5, 16)


def regime_of(tag, g0=0.5):
    return BoundaryRegime(tag, g0 if tag[1] == "I" else 0.0)


def planted_cost(grid, tag, order=3):
    """Smooth nonzero cost of the class matching ``tag``."""
    x, y = grid.x, grid.y
    if tag[1] == "H":
        coeffs = (1 + 0.5 * np.sin(np.pi * x) * np.sin(np.pi * y), 0.5 + 0.4 * np.sin(np.pi * x) * np.sin(2 * np.pi * y),
                  0.3 + 0 * x)
        return RunningCost(0.0, coeffs[:order])
    coeffs = (0 * x, 1 + 0.3 * x, 0.5 + 0 * x)
    return RunningCost(0.5, coeffs[:order])


def positive_direction(grid):
    return 0.05 + np.sin(np.pi * grid.x) * np.sin(np.pi * grid.y)


def three_edge_patch(grid):
    return boundary_patch(grid, THREE_EDGES)
