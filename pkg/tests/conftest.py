import math

import numpy as np
import pytest

from halfdiff.grid import EquationCoefficients, SpatialGrid, TimeGrid, assemble_elliptic

SQ = math.sqrt(math.pi)


def mms_source(t, x):
    """Source for u = t^2 sin(pi x) with rho1 = rho2 = 1 and L = d_xx."""
    return (2 * t + 8 / (3 * SQ) * t**1.5 + math.pi**2 * t**2) * np.sin(math.pi * x)


def mms_exact(t, x):
    return t**2 * np.sin(math.pi * x)


@pytest.fixture
def unit_coeffs():
    return EquationCoefficients(1.0, 1.0)


def setup_1d(nc, N, T=1.0):
    grid = SpatialGrid.interval(0.0, 1.0, nc)
    tg = TimeGrid(T, N, N // 2)
    return grid, tg, assemble_elliptic(grid)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
