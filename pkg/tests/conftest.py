import numpy as np
import pytest

from spcontrol import ProblemCoefficients, build_grid, build_tree


@pytest.fixture(scope="session")
def grid16():
    return build_grid(1.0, 16, (0.3, 0.8), (0.45, 0.65))


@pytest.fixture(scope="session")
def grid32():
    return build_grid(1.0, 32, (0.3, 0.8), (0.45, 0.65))


@pytest.fixture(scope="session")
def tree6():
    return build_tree(6, 1.0)


@pytest.fixture(scope="session")
def tree8():
    return build_tree(8, 1.0)


@pytest.fixture(scope="session")
def full_coeffs():
    """All lower-order terms switched on, mildly varying in (t, x)."""
    return ProblemCoefficients(
        a=lambda t, x: 1.0 + 0.4 * np.sin(2 * np.pi * x) + 0.1 * t,
        a1=lambda t, x: 0.8 * np.cos(np.pi * x) - 0.5 * t,
        a2=0.5,
        b1=lambda t, x: 0.5 * np.sin(np.pi * x + t),
        b2=0.4,
        b=lambda t, x: 0.5 * np.cos(np.pi * x),
    )
