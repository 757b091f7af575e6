# 逆运动学（力密度法）
# Inverse kinematics: rest lengths that hold a pose in static equilibrium

"""Force-density inverse kinematics.

For cable i with anchor a_i, moving point b_i and force density q_i the
force on the upper vertebra is q_i (a_i - b_i). Stacking force and moment
balance of every moving vertebra gives E q = -load. Among the feasible
densities with q >= q_min the smallest ||q||^2 is taken, then tensions are
T_i = q_i l_i and rest lengths rho_i = l_i - T_i / k_s.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.core.exceptions import CableGeometryError, InverseKinematicsError
from app.core.logging import get_logger
from app.models.numerics import QpProblem, QpStatus
from app.models.schemas import SpineConfig
from app.services import qp_solver
from app.services.spine_model import cable_bodies, cable_endpoints, check_state, state_layout

logger = get_logger("app.inverse_kinematics")

DEFAULT_Q_MIN = 0.5
_DENSITY_SLACK = 1e-6


@dataclass(frozen=True)
class ForceDensityProblem:
    """E q = -load, q >= q_min."""

    equilibrium: np.ndarray
    load: np.ndarray
    q_min: float = DEFAULT_Q_MIN

    def __post_init__(self) -> None:
        if self.q_min <= 0:
            raise InverseKinematicsError("q_min must be positive so every cable stays taut")
        if self.equilibrium.shape[0] != self.load.shape[0]:
            raise InverseKinematicsError("equilibrium matrix and load vector disagree in size")


def _planar_moment(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.array([r[0] * v[1] - r[1] * v[0]])


def equilibrium_matrix(config: SpineConfig, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equilibrium matrix, gravity load and cable lengths at the pose in xi.

    Rows are grouped per moving vertebra as (force, moment); moments are
    taken about the vertebra center.
    """
    xi = check_state(config, xi)
    layout = state_layout(config)
    moment = _planar_moment if config.is_planar else np.cross
    rows_per_body = layout.pose_dim

    ends = cable_endpoints(config, xi)
    anchor, moving = ends[:, 0], ends[:, 1]
    span = anchor - moving
    lengths = np.linalg.norm(span, axis=1)
    if np.any(lengths <= 0.0):
        raise CableGeometryError("zero-length cable at the requested pose")

    centers = np.zeros((layout.num_bodies + 1, layout.position_dim))
    for body in range(layout.num_bodies):
        centers[body + 1] = xi[layout.position_slice(body)]

    lower_body, upper_body = cable_bodies(config)
    E = np.zeros((layout.num_bodies * rows_per_body, config.num_cables))
    for j in range(config.num_cables):
        upper = upper_body[j] - 1
        rows = slice(upper * rows_per_body, (upper + 1) * rows_per_body)
        E[rows, j] = np.concatenate([span[j], moment(moving[j] - centers[upper_body[j]], span[j])])
        if lower_body[j] > 0:
            lower = lower_body[j] - 1
            rows = slice(lower * rows_per_body, (lower + 1) * rows_per_body)
            E[rows, j] = np.concatenate([-span[j], moment(anchor[j] - centers[lower_body[j]], -span[j])])

    load = np.zeros(E.shape[0])
    for body in range(layout.num_bodies):
        load[body * rows_per_body + layout.position_dim - 1] = -config.vertebra_mass * config.gravity
    return E, load, lengths


def solve_force_densities(problem: ForceDensityProblem, tol: Optional[float] = None) -> np.ndarray:
    """Minimum-norm force densities balancing the load."""
    E, load = problem.equilibrium, problem.load
    n = E.shape[1]
    qp = QpProblem(
        H=2.0 * np.eye(n),
        f=np.zeros(n),
        A_ineq=-np.eye(n),
        b_ineq=np.full(n, -problem.q_min),
        A_eq=E,
        b_eq=-load,
    )
    solution = qp_solver.solve(qp, tol=tol)
    if solution.status == QpStatus.INFEASIBLE:
        raise InverseKinematicsError("no taut-cable equilibrium exists at this pose")
    if not solution.optimal:
        raise InverseKinematicsError(f"force-density QP ended with status {solution.status.value}")

    # polish the equality residual down to round-off
    q = solution.z + np.linalg.lstsq(E, -load - E @ solution.z, rcond=None)[0]
    if np.min(q) < problem.q_min - _DENSITY_SLACK:
        raise InverseKinematicsError("force densities fell below q_min", {"q": q.tolist()})
    return q


def ik_tensions(
    config: SpineConfig,
    xi_ref: np.ndarray,
    q_min: float = DEFAULT_Q_MIN,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(force densities, tensions, cable lengths) at the pose in xi_ref."""
    E, load, lengths = equilibrium_matrix(config, xi_ref)
    q = solve_force_densities(ForceDensityProblem(equilibrium=E, load=load, q_min=q_min))
    return q, q * lengths, lengths


def ik_rest_lengths(
    config: SpineConfig,
    xi_ref: np.ndarray,
    q_min: float = DEFAULT_Q_MIN,
    u_max: float = 0.3,
) -> np.ndarray:
    """Rest lengths u_ref holding xi_ref (velocities ignored) in equilibrium."""
    try:
        _, tensions, lengths = ik_tensions(config, xi_ref, q_min)
    except InverseKinematicsError as e:
        logger.error(f"inverse kinematics failed: {e.message}")
        raise
    rest = lengths - tensions / config.cable_stiffness
    if np.any(rest <= 0.0) or np.any(rest > u_max):
        logger.error(f"rest lengths outside (0, {u_max}]: {np.round(rest, 6).tolist()}")
        raise InverseKinematicsError(
            f"rest lengths outside (0, {u_max}]",
            {"rest_lengths": rest.tolist(), "u_max": u_max},
        )
    return rest


def ik_trajectory(
    config: SpineConfig,
    states: np.ndarray,
    q_min: float = DEFAULT_Q_MIN,
    u_max: float = 0.3,
) -> np.ndarray:
    """Row-wise ik_rest_lengths over a state trajectory."""
    return np.stack([ik_rest_lengths(config, xi, q_min, u_max) for xi in states])
