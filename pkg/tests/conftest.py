import numpy as np
import pytest

from vbtactile.elasticity import FingertipGeometry, build_conversion_matrix
from vbtactile.geometry.lightpath import LightPathSpec, solve_light_path


@pytest.fixture(scope="session")
def light_path():
    return solve_light_path(LightPathSpec())


@pytest.fixture(scope="session")
def sensor_h():
    """20 x 20 markers, one element per marker spacing."""
    geom = FingertipGeometry(subdivisions=1)
    H, mesh, K = build_conversion_matrix(geom)
    return H, mesh, K


@pytest.fixture(scope="session")
def small_h():
    """8 x 8 markers, one element per marker spacing."""
    geom = FingertipGeometry(rows=8, cols=8, subdivisions=1)
    H, mesh, K = build_conversion_matrix(geom)
    return H, mesh, K


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
