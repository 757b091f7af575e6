import numpy as np
import pytest

from app.models.numerics import StateLayout
from app.models.schemas import ReferenceControllerConfig, SpineConfig
from app.services.inverse_kinematics import ik_rest_lengths
from app.services.spine_model import SpinePlant, home_state


class DoubleIntegrator:
    """x+ = x + dt v + dt^2/2 u, v+ = v + dt u."""

    def __init__(self, dt: float = 0.5):
        self.dt = dt
        self.layout = StateLayout(num_bodies=1, position_dim=1, angle_dim=0)
        self.state_dim = 2
        self.input_dim = 1
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt**2], [dt]])

    def step(self, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ np.asarray(xi, dtype=float) + self.B @ np.asarray(u, dtype=float)


@pytest.fixture(scope="session")
def planar_config() -> SpineConfig:
    return SpineConfig.planar_default()


@pytest.fixture(scope="session")
def spatial_config() -> SpineConfig:
    return SpineConfig.spatial_default()


@pytest.fixture(scope="session")
def planar_home(planar_config) -> np.ndarray:
    return home_state(planar_config)


@pytest.fixture(scope="session")
def spatial_home(spatial_config) -> np.ndarray:
    return home_state(spatial_config)


@pytest.fixture(scope="session")
def planar_ik(planar_config, planar_home) -> np.ndarray:
    return ik_rest_lengths(planar_config, planar_home)


@pytest.fixture(scope="session")
def spatial_ik(spatial_config, spatial_home) -> np.ndarray:
    return ik_rest_lengths(spatial_config, spatial_home)


@pytest.fixture
def planar_plant(planar_config) -> SpinePlant:
    return SpinePlant(planar_config)


@pytest.fixture
def toy_plant() -> DoubleIntegrator:
    return DoubleIntegrator()


@pytest.fixture
def toy_reference_config() -> ReferenceControllerConfig:
    return ReferenceControllerConfig(
        horizon=4,
        u_min=-1.0,
        u_max=1.0,
        z_index=None,
        q_diag=[1.0, 1.0],
        p_diag=[1.0, 1.0],
        r_diag=[2.0],
    )
