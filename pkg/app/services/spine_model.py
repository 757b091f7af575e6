# 张拉整体脊柱模型
# Tensegrity spine geometry and cable-driven dynamics

"""Nonlinear plant of the cable-driven spine.

Vertebrae are rigid bodies with lumped translational and rotational
dynamics. Cables are spring-dampers whose tension saturates at zero, so a
slack cable exerts no force. The base vertebra (body 0) is fixed at the
origin pose; moving vertebrae are bodies 1..B.

State per moving vertebra:
    2-D: (x, z, theta, dx, dz, dtheta)
    3-D: (x, y, z, phi, theta, psi, and the six rates)
3-D rotations use R = Rz(psi) Ry(theta) Rx(phi) and treat Euler-angle rates
as the body angular velocity (small rotations).
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from app.core.exceptions import CableGeometryError, DimensionMismatchError
from app.core.logging import get_logger
from app.models.numerics import StateLayout
from app.models.schemas import SpineConfig

logger = get_logger("app.spine_model")

ArrayOrFloat = Union[np.ndarray, float]


def state_layout(config: SpineConfig) -> StateLayout:
    if config.is_planar:
        return StateLayout(num_bodies=config.num_moving_vertebrae, position_dim=2, angle_dim=1)
    return StateLayout(num_bodies=config.num_moving_vertebrae, position_dim=3, angle_dim=3)


def home_state(config: SpineConfig) -> np.ndarray:
    """Vertebrae stacked straight up at vertebra_spacing, at rest."""
    layout = state_layout(config)
    xi = np.zeros(layout.state_dim)
    for body in range(layout.num_bodies):
        xi[layout.z_index(body)] = (body + 1) * config.vertebra_spacing
    return xi


def rotation_matrix(angles: np.ndarray) -> np.ndarray:
    """2-D rotation for one angle, Rz(psi) Ry(theta) Rx(phi) for three."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.shape[0] == 1:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])

    phi, theta, psi = angles
    cx, sx = np.cos(phi), np.sin(phi)
    cy, sy = np.cos(theta), np.sin(theta)
    cz, sz = np.cos(psi), np.sin(psi)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def _cross(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Moment arm cross product; scalar (as shape (..., 1)) in the x-z plane."""
    if r.shape[-1] == 2:
        return (r[..., 0] * v[..., 1] - r[..., 1] * v[..., 0])[..., None]
    return np.cross(r, v)


def _spin(omega: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Velocity of a point at arm r on a body spinning at omega."""
    if r.shape[-1] == 2:
        return omega[..., 0:1] * np.stack([-r[..., 1], r[..., 0]], axis=-1)
    return np.cross(omega, r)


def check_state(config: SpineConfig, xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    expected = state_layout(config).state_dim
    if xi.shape[0] != expected:
        raise DimensionMismatchError(f"state has {xi.shape[0]} entries, model expects {expected}")
    if not np.all(np.isfinite(xi)):
        raise DimensionMismatchError("state contains non-finite entries")
    return xi


def check_input(config: SpineConfig, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != config.num_cables:
        raise DimensionMismatchError(f"input has {u.shape[0]} entries, model expects {config.num_cables}")
    return u


@dataclass(frozen=True)
class _Kinematics:
    centers: np.ndarray  # (B+1, d)
    velocities: np.ndarray  # (B+1, d)
    omegas: np.ndarray  # (B+1, 1|3)
    nodes: np.ndarray  # (B+1, K, d) world positions
    node_velocities: np.ndarray  # (B+1, K, d)


def _kinematics(config: SpineConfig, xi: np.ndarray) -> _Kinematics:
    layout = state_layout(config)
    bodies = layout.num_bodies + 1
    d, a = layout.position_dim, layout.angle_dim

    centers = np.zeros((bodies, d))
    velocities = np.zeros((bodies, d))
    angles = np.zeros((bodies, a))
    omegas = np.zeros((bodies, a))
    for body in range(layout.num_bodies):
        block = xi[body * layout.block:(body + 1) * layout.block]
        centers[body + 1] = block[:d]
        angles[body + 1] = block[d:d + a]
        velocities[body + 1] = block[d + a:2 * d + a]
        omegas[body + 1] = block[2 * d + a:]

    offsets = np.asarray(config.node_offsets, dtype=float)
    rotations = np.stack([rotation_matrix(angle) for angle in angles])
    arms = np.einsum("bij,kj->bki", rotations, offsets)
    nodes = centers[:, None, :] + arms
    node_velocities = velocities[:, None, :] + _spin(omegas[:, None, :], arms)
    return _Kinematics(centers, velocities, omegas, nodes, node_velocities)


def _cable_index(config: SpineConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(lower body, lower node, upper body, upper node) per cable, pair-major."""
    routing = np.asarray(config.cable_routing, dtype=int)
    pairs = np.repeat(np.arange(config.num_moving_vertebrae), len(routing))
    lower_nodes = np.tile(routing[:, 0], config.num_moving_vertebrae)
    upper_nodes = np.tile(routing[:, 1], config.num_moving_vertebrae)
    return pairs, lower_nodes, pairs + 1, upper_nodes


def cable_bodies(config: SpineConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(lower body, upper body) of every cable; body 0 is the fixed base."""
    lower_body, _, upper_body, _ = _cable_index(config)
    return lower_body, upper_body


def cable_endpoints(config: SpineConfig, xi: np.ndarray) -> np.ndarray:
    """World coordinates of both ends of every cable.

    Returns shape (num_cables, 2, d): [:, 0] is the anchor on the lower
    vertebra, [:, 1] the point on the upper (moving) vertebra.
    """
    xi = check_state(config, xi)
    kin = _kinematics(config, xi)
    lower_body, lower_node, upper_body, upper_node = _cable_index(config)
    return np.stack([kin.nodes[lower_body, lower_node], kin.nodes[upper_body, upper_node]], axis=1)


def cable_tension(
    length: ArrayOrFloat,
    length_rate: ArrayOrFloat,
    rest_length: ArrayOrFloat,
    config: SpineConfig,
) -> ArrayOrFloat:
    """T = max(0, k_s (l - rho) + c_d dl/dt)."""
    length = np.asarray(length, dtype=float)
    rest_length = np.asarray(rest_length, dtype=float)
    if np.any(length <= 0.0):
        raise CableGeometryError("cable length must be positive", {"length": length.tolist()})
    # rho = 0 is a fully taut cable and stays admissible (u_min = 0)
    if np.any(rest_length < 0.0):
        raise CableGeometryError("rest length must be nonnegative", {"rest_length": rest_length.tolist()})

    elastic = config.cable_stiffness * (length - rest_length) + config.cable_damping * np.asarray(length_rate)
    tension = np.maximum(0.0, elastic)
    return float(tension) if tension.ndim == 0 else tension


def _cable_state(config: SpineConfig, kin: _Kinematics):
    lower_body, lower_node, upper_body, upper_node = _cable_index(config)
    anchor = kin.nodes[lower_body, lower_node]
    moving = kin.nodes[upper_body, upper_node]
    span = anchor - moving
    length = np.linalg.norm(span, axis=1)
    if np.any(length <= 0.0):
        raise CableGeometryError("zero-length cable at this pose")
    direction = span / length[:, None]
    rel_velocity = kin.node_velocities[lower_body, lower_node] - kin.node_velocities[upper_body, upper_node]
    length_rate = np.einsum("ij,ij->i", direction, rel_velocity)
    return lower_body, upper_body, anchor, moving, direction, length, length_rate


def dynamics(config: SpineConfig, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Continuous-time state derivative g_c(xi, u)."""
    xi = check_state(config, xi)
    u = check_input(config, u)
    layout = state_layout(config)
    kin = _kinematics(config, xi)

    lower_body, upper_body, anchor, moving, direction, length, length_rate = _cable_state(config, kin)
    tension = cable_tension(length, length_rate, u, config)

    # force on the upper node points along the cable toward the anchor
    upper_force = tension[:, None] * direction
    bodies = layout.num_bodies + 1
    force = np.zeros((bodies, layout.position_dim))
    torque = np.zeros((bodies, layout.angle_dim))
    np.add.at(force, upper_body, upper_force)
    np.add.at(force, lower_body, -upper_force)
    np.add.at(torque, upper_body, _cross(moving - kin.centers[upper_body], upper_force))
    np.add.at(torque, lower_body, _cross(anchor - kin.centers[lower_body], -upper_force))
    force[:, -1] -= config.vertebra_mass * config.gravity

    inertia = np.asarray(config.vertebra_inertia, dtype=float)
    xi_dot = np.empty_like(xi)
    for body in range(layout.num_bodies):
        start = body * layout.block
        xi_dot[start:start + layout.pose_dim] = xi[start + layout.pose_dim:start + layout.block]
        xi_dot[layout.velocity_slice(body)] = np.concatenate(
            [force[body + 1] / config.vertebra_mass, torque[body + 1] / inertia]
        )
    return xi_dot


def step(config: SpineConfig, xi: np.ndarray, u: np.ndarray, dt: Optional[float] = None) -> np.ndarray:
    """Forward Euler step f(xi, u) = xi + dt g_c(xi, u)."""
    h = config.dt if dt is None else dt
    xi = np.asarray(xi, dtype=float)
    return xi + h * dynamics(config, xi, u)


def mechanical_energy(config: SpineConfig, xi: np.ndarray, u: np.ndarray) -> float:
    """Kinetic + elastic (taut cables) + gravitational energy."""
    xi = check_state(config, xi)
    u = check_input(config, u)
    layout = state_layout(config)
    kin = _kinematics(config, xi)
    *_, length, _ = _cable_state(config, kin)

    stretch = np.maximum(0.0, length - u)
    elastic = 0.5 * config.cable_stiffness * float(np.sum(stretch**2))
    inertia = np.asarray(config.vertebra_inertia, dtype=float)
    kinetic = 0.5 * config.vertebra_mass * float(np.sum(kin.velocities[1:] ** 2))
    kinetic += 0.5 * float(np.sum(inertia * kin.omegas[1:] ** 2))
    potential = config.vertebra_mass * config.gravity * float(np.sum(kin.centers[1:, layout.position_dim - 1]))
    return kinetic + elastic + potential


class SpinePlant:
    """Plant adapter over a SpineConfig for the closed loop and linearize()."""

    def __init__(self, config: SpineConfig):
        self.config = config
        self.layout = state_layout(config)
        self.state_dim = self.layout.state_dim
        self.input_dim = config.num_cables
        self.dt = config.dt

    def step(self, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
        return step(self.config, xi, u)

    def home_state(self) -> np.ndarray:
        return home_state(self.config)
