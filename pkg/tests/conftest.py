"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from src.sdmreg.config import RegistrationConfig
from src.sdmreg.losses import MODE_PRESETS
from src.sdmreg.volume import Grid

from .helpers import ball_mask


@pytest.fixture
def rng():
    """Seeded random generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def grid12():
    return Grid((12, 12, 12))


@pytest.fixture
def grid24():
    return Grid((24, 24, 24))


@pytest.fixture
def sphere_pair(grid24):
    """Sphere of radius 6 voxels and the same sphere shifted 2 voxels along x."""
    center = grid24.center
    fixed = ball_mask(grid24, center, 6.0)
    moving = ball_mask(grid24, center + np.array([2.0, 0.0, 0.0]), 6.0)
    return moving, fixed


@pytest.fixture
def quick_config():
    """Small iteration budget for registrations inside unit tests."""
    return RegistrationConfig(
        weights=MODE_PRESETS["mix"],
        levels=2,
        iters_per_level=8,
        convergence_tol=0.0,
    )


# Pytest markers for different test categories
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "slow: Slow acceptance-scale tests, deselected by default")
