import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.exceptions import CableGeometryError, DimensionMismatchError
from app.services.spine_model import (
    SpinePlant,
    cable_endpoints,
    cable_tension,
    dynamics,
    home_state,
    mechanical_energy,
    rotation_matrix,
    state_layout,
    step,
)

angles = st.floats(min_value=-np.pi, max_value=np.pi, allow_nan=False)


def test_home_state_stacks_vertebrae_at_spacing(spatial_config):
    xi = home_state(spatial_config)
    layout = state_layout(spatial_config)
    assert xi.shape == (36,)
    heights = [xi[layout.z_index(b)] for b in range(3)]
    assert heights == pytest.approx([0.12, 0.24, 0.36])


def test_planar_state_is_six_dimensional(planar_config):
    plant = SpinePlant(planar_config)
    assert (plant.state_dim, plant.input_dim) == (6, 4)
    assert plant.layout.z_index(0) == 1


def test_spatial_dimensions(spatial_config):
    plant = SpinePlant(spatial_config)
    assert (plant.state_dim, plant.input_dim) == (36, 24)


def test_cable_endpoints_at_planar_home(planar_config, planar_home):
    ends = cable_endpoints(planar_config, planar_home)
    assert ends.shape == (4, 2, 2)
    # vertical cable 0 runs from (-0.1, -0.05) to (-0.1, 0.05)
    np.testing.assert_allclose(ends[0], [[-0.1, -0.05], [-0.1, 0.05]], atol=1e-15)
    # saddle cable 2 runs from the base top node to the upper left node
    np.testing.assert_allclose(ends[2], [[0.0, 0.1], [-0.1, 0.05]], atol=1e-15)


def test_slack_cable_has_zero_tension(planar_config):
    assert cable_tension(0.1, 0.0, 0.2, planar_config) == 0.0
    assert cable_tension(0.1, -1.0, 0.1, planar_config) == 0.0


def test_taut_cable_tension(planar_config):
    expected = 500.0 * 0.02 + 10.0 * 0.1
    assert cable_tension(0.12, 0.1, 0.1, planar_config) == pytest.approx(expected)


def test_zero_rest_length_is_admissible(planar_config):
    assert cable_tension(0.1, 0.0, 0.0, planar_config) == pytest.approx(50.0)


def test_negative_rest_length_rejected(planar_config):
    with pytest.raises(CableGeometryError):
        cable_tension(0.1, 0.0, -0.01, planar_config)


def test_nonpositive_length_rejected(planar_config):
    with pytest.raises(CableGeometryError):
        cable_tension(0.0, 0.0, 0.1, planar_config)


@settings(max_examples=50, deadline=None)
@given(
    length=st.floats(min_value=1e-3, max_value=1.0),
    rate=st.floats(min_value=-5.0, max_value=5.0),
    rest=st.floats(min_value=0.0, max_value=1.0),
)
def test_tension_is_never_negative(length, rate, rest):
    from app.models.schemas import SpineConfig

    assert cable_tension(length, rate, rest, SpineConfig.planar_default()) >= 0.0


@settings(max_examples=50, deadline=None)
@given(phi=angles, theta=angles, psi=angles)
def test_rotation_is_orthonormal(phi, theta, psi):
    R = rotation_matrix(np.array([phi, theta, psi]))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_rotation_order_is_z_y_x():
    R = rotation_matrix(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)
    pitch = rotation_matrix(np.array([0.0, -0.3, 0.0]))
    # negative pitch tilts the body z axis toward -x
    assert (pitch @ np.array([0.0, 0.0, 1.0]))[0] < 0.0


def test_all_slack_cables_leave_free_fall(planar_config, planar_home):
    xi_dot = dynamics(planar_config, planar_home, np.full(4, 0.3))
    np.testing.assert_allclose(xi_dot, [0.0, 0.0, 0.0, 0.0, -9.81, 0.0], atol=1e-12)


def test_ik_rest_lengths_hold_the_home_pose(planar_config, planar_home, planar_ik):
    xi_dot = dynamics(planar_config, planar_home, planar_ik)
    assert np.linalg.norm(xi_dot[3:]) <= 1e-6


def test_step_is_forward_euler(planar_config, planar_home):
    u = np.full(4, 0.09)
    expected = planar_home + planar_config.dt * dynamics(planar_config, planar_home, u)
    np.testing.assert_array_equal(step(planar_config, planar_home, u), expected)


def test_spatial_step_is_finite(spatial_config, spatial_home, spatial_ik):
    xi = spatial_home
    for _ in range(20):
        xi = step(spatial_config, xi, spatial_ik)
    assert np.all(np.isfinite(xi))
    assert np.max(np.abs(xi - spatial_home)) < 1e-6


def test_wrong_state_size_rejected(planar_config):
    with pytest.raises(DimensionMismatchError):
        dynamics(planar_config, np.zeros(5), np.zeros(4))


def test_wrong_input_size_rejected(planar_config, planar_home):
    with pytest.raises(DimensionMismatchError):
        dynamics(planar_config, planar_home, np.zeros(3))


def test_damping_dissipates_energy(planar_config, planar_home, planar_ik):
    xi = planar_home.copy()
    xi[3] = 0.05
    xi[5] = 0.2
    energies = [mechanical_energy(planar_config, xi, planar_ik)]
    for _ in range(100):
        xi = step(planar_config, xi, planar_ik)
        energies.append(mechanical_energy(planar_config, xi, planar_ik))
    # explicit Euler adds O(dt^2) per step, damping must win over 100 steps
    assert energies[-1] < energies[0]
    assert max(energies[1:]) <= energies[0] + 1e-6 * abs(energies[0])


def test_planar_endpoints_follow_translation_and_quarter_turn(planar_config, planar_home):
    xi = planar_home.copy()
    xi[0] += 0.1
    xi[2] = np.pi / 2
    ends = cable_endpoints(planar_config, xi)
    # base anchors do not move
    np.testing.assert_allclose(ends[:, 0], [[-0.1, -0.05], [0.1, -0.05], [0.0, 0.1], [0.0, 0.1]], atol=1e-15)
    # upper nodes (-0.1, -0.05), (0.1, -0.05) turn to (0.05, -0.1), (0.05, 0.1) around the center (0.1, 0.1)
    np.testing.assert_allclose(ends[:, 1], [[0.15, 0.0], [0.15, 0.2], [0.15, 0.0], [0.15, 0.2]], atol=1e-15)


def test_spatial_endpoints_follow_translation_and_yaw(spatial_config, spatial_home):
    xi = spatial_home.copy()
    xi[0] += 0.1
    xi[5] = np.pi / 2
    ends = cable_endpoints(spatial_config, xi)
    assert ends.shape == (24, 2, 3)
    np.testing.assert_allclose(ends[0, 0], [0.075, 0.0, -0.075], atol=1e-15)
    # yaw by 90 degrees maps (x, y, z) to (-y, x, z)
    np.testing.assert_allclose(ends[0, 1], [0.1, 0.075, 0.045], atol=1e-15)
    np.testing.assert_allclose(ends[2, 1], [0.025, 0.0, 0.195], atol=1e-15)
    # the next pair hangs from the moved vertebra; the vertebra above it stays put
    np.testing.assert_allclose(ends[8, 0], ends[0, 1], atol=1e-15)
    np.testing.assert_allclose(ends[8, 1], [0.075, 0.0, 0.165], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(
    offsets=st.lists(st.floats(min_value=-0.005, max_value=0.005), min_size=3, max_size=3),
    rates=st.lists(st.floats(min_value=-0.05, max_value=0.05), min_size=3, max_size=3),
    rest=st.lists(st.floats(min_value=0.0, max_value=0.15), min_size=4, max_size=4),
)
def test_planar_dynamics_commute_with_mirroring(offsets, rates, rest):
    from app.models.schemas import SpineConfig

    config = SpineConfig.planar_default()
    xi = home_state(config) + np.concatenate([offsets, rates])
    u = np.array(rest)
    # x -> -x flips x, theta and their rates and swaps the left and right cables
    flip = np.array([-1.0, 1.0, -1.0, -1.0, 1.0, -1.0])
    swap = [1, 0, 3, 2]
    mirrored = dynamics(config, flip * xi, u[swap])
    np.testing.assert_allclose(mirrored, flip * dynamics(config, xi, u), atol=1e-10)


def test_accelerations_match_summed_cable_forces(planar_config, planar_home):
    config = planar_config.model_copy(update={"gravity": 0.0})
    xi = planar_home.copy()
    xi[:3] += [0.004, -0.003, 0.05]
    u = np.array([0.085, 0.09, 0.1, 0.095])
    ends = cable_endpoints(config, xi)
    span = ends[:, 0] - ends[:, 1]
    length = np.linalg.norm(span, axis=1)
    tension = cable_tension(length, np.zeros(4), u, config)
    forces = tension[:, None] * span / length[:, None]
    arms = ends[:, 1] - xi[:2]
    moment = np.sum(arms[:, 0] * forces[:, 1] - arms[:, 1] * forces[:, 0])

    xi_dot = dynamics(config, xi, u)
    np.testing.assert_allclose(xi_dot[3:5] * config.vertebra_mass, forces.sum(axis=0), atol=1e-10)
    assert xi_dot[5] * config.vertebra_inertia[0] == pytest.approx(moment, abs=1e-10)


def test_symmetric_pose_has_no_lateral_force_or_moment(planar_config, planar_home):
    config = planar_config.model_copy(update={"gravity": 0.0})
    xi_dot = dynamics(config, planar_home, np.array([0.08, 0.08, 0.1, 0.1]))
    assert abs(xi_dot[3]) <= 1e-10
    assert abs(xi_dot[5]) <= 1e-10
    assert xi_dot[4] < 0.0


def test_euler_step_is_first_order(planar_config, planar_home):
    from scipy.integrate import solve_ivp

    xi0 = planar_home.copy()
    xi0[3:] = [0.05, 0.02, 0.3]
    ends = cable_endpoints(planar_config, xi0)
    # 2 cm of pre-stretch keeps every cable taut along the whole run
    u = np.linalg.norm(ends[:, 0] - ends[:, 1], axis=1) - 0.02
    horizon = 0.05
    exact = solve_ivp(
        lambda _, xi: dynamics(planar_config, xi, u),
        (0.0, horizon),
        xi0,
        method="DOP853",
        rtol=1e-12,
        atol=1e-14,
    ).y[:, -1]

    dts = np.array([1e-2, 1e-3, 1e-4])
    errors = []
    for dt in dts:
        xi = xi0.copy()
        for _ in range(int(round(horizon / dt))):
            xi = step(planar_config, xi, u, dt=dt)
        errors.append(np.linalg.norm(xi - exact))
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)
