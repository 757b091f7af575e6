# 参考轨迹与扰动生成
# Reference bend trajectories and state disturbances

from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from app.core.exceptions import TrajectoryError
from app.core.logging import get_logger
from app.models.numerics import ReferenceTrajectory, StateLayout
from app.models.schemas import DisturbanceSpec, SpineConfig
from app.services.inverse_kinematics import DEFAULT_Q_MIN, ik_trajectory
from app.services.spine_model import state_layout
from app.utils.io import write_csv

logger = get_logger("app.trajgen")


def _sinc_half(phi: np.ndarray) -> np.ndarray:
    """sin(phi/2) / (phi/2)."""
    return np.sinc(phi / (2.0 * np.pi))


def _sinc_half_derivative(phi: np.ndarray) -> np.ndarray:
    """d/dphi of sin(phi/2) / (phi/2)."""
    x = 0.5 * np.asarray(phi, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    exact = (safe * np.cos(safe) - np.sin(safe)) / safe**2
    return 0.5 * np.where(small, -x / 3.0, exact)


def bend_schedule(times: np.ndarray, sweep_angle: float, duration: float):
    """Cosine ramp beta(t) from 0 to sweep_angle over duration, then held."""
    tau = np.clip(times, 0.0, duration) / duration
    beta = 0.5 * sweep_angle * (1.0 - np.cos(np.pi * tau))
    beta_dot = np.where(times < duration, 0.5 * sweep_angle * np.pi / duration * np.sin(np.pi * tau), 0.0)
    return beta, beta_dot


def _arc_states(config: SpineConfig, beta: np.ndarray, beta_dot: np.ndarray) -> np.ndarray:
    layout = state_layout(config)
    bodies = layout.num_bodies
    s = config.vertebra_spacing
    phi = beta / bodies
    phi_dot = beta_dot / bodies

    chord = s * _sinc_half(phi)
    chord_dot = s * _sinc_half_derivative(phi)

    # planar (x, z) placement of each vertebra along the arc
    pos = np.zeros((beta.shape[0], 2))
    dpos = np.zeros((beta.shape[0], 2))
    states = np.zeros((beta.shape[0], layout.state_dim))
    for i in range(1, bodies + 1):
        a = (i - 0.5) * phi
        heading = np.stack([-np.sin(a), np.cos(a)], axis=1)
        heading_dot = (i - 0.5) * np.stack([-np.cos(a), -np.sin(a)], axis=1)
        pos = pos + chord[:, None] * heading
        dpos = dpos + chord_dot[:, None] * heading + chord[:, None] * heading_dot

        angle, rate = i * phi, i * phi_dot
        velocity = dpos * phi_dot[:, None]
        body = i - 1
        if config.is_planar:
            states[:, layout.position_slice(body)] = pos
            states[:, layout.angle_slice(body)] = angle[:, None]
            vel = layout.velocity_slice(body)
            states[:, vel.start:vel.start + 2] = velocity
            states[:, vel.start + 2] = rate
        else:
            start = layout.position_slice(body).start
            states[:, start] = pos[:, 0]
            states[:, start + 2] = pos[:, 1]
            # counterclockwise in x-z is a negative pitch about y
            states[:, layout.angle_slice(body).start + 1] = -angle
            vel = layout.velocity_slice(body).start
            states[:, vel] = velocity[:, 0]
            states[:, vel + 2] = velocity[:, 1]
            states[:, vel + 4] = -rate
    return states


def check_collisions(
    config: SpineConfig,
    states: np.ndarray,
    collision_margin: Optional[float] = None,
) -> None:
    """Raise TrajectoryError if any sample breaks the collision bounds.

    Planar: every vertebra stays at z >= h/2. Spatial: consecutive vertebrae
    keep z_i + margin <= z_(i+1).
    """
    layout = state_layout(config)
    z = states[:, [layout.z_index(body) for body in range(layout.num_bodies)]]
    if config.is_planar:
        floor = 0.5 * config.vertebra_height
        if np.any(z < floor):
            worst = int(np.argmin(z.min(axis=1)))
            raise TrajectoryError(f"reference drops below z = h/2 at sample {worst}", {"z": float(z.min())})
        return
    margin = 0.0 if collision_margin is None else collision_margin
    gaps = z[:, 1:] - z[:, :-1] - margin
    if gaps.size and np.any(gaps < 0.0):
        worst = int(np.argmin(gaps.min(axis=1)))
        raise TrajectoryError(f"vertebrae closer than margin {margin} at sample {worst}", {"gap": float(gaps.min())})


def generate_bend(
    config: SpineConfig,
    sweep_angle: float,
    duration: float,
    hold: float = 0.0,
    with_inputs: bool = False,
    collision_margin: Optional[float] = None,
    q_min: float = DEFAULT_Q_MIN,
    u_max: float = 0.3,
) -> ReferenceTrajectory:
    """Counterclockwise constant-curvature bend in the x-z plane.

    Each of the B moving vertebrae turns by beta/B relative to the one
    below it, so vertebra i sits at angle i*beta/B on a circular backbone
    with arc length vertebra_spacing per segment. Velocities are analytic.
    """
    if duration <= 0:
        raise TrajectoryError("duration must be positive")
    if hold < 0:
        raise TrajectoryError("hold must be nonnegative")

    samples = int(round((duration + hold) / config.dt))
    times = config.dt * np.arange(samples + 1)
    beta, beta_dot = bend_schedule(times, sweep_angle, duration)
    states = _arc_states(config, beta, beta_dot)
    check_collisions(config, states, collision_margin)

    inputs = None
    if with_inputs:
        logger.info(f"computing inverse-kinematics inputs for {len(times)} reference samples")
        inputs = ik_trajectory(config, states, q_min=q_min, u_max=u_max)

    return ReferenceTrajectory(
        times=times,
        states=states,
        inputs=inputs,
        sweep_angle=sweep_angle,
        duration=duration,
    )


def constant_trajectory(xi: np.ndarray, steps: int, dt: float, u: Optional[np.ndarray] = None) -> ReferenceTrajectory:
    """steps + 1 copies of one state (and input)."""
    times = dt * np.arange(steps + 1)
    states = np.tile(np.asarray(xi, dtype=float), (steps + 1, 1))
    inputs = None if u is None else np.tile(np.asarray(u, dtype=float), (steps + 1, 1))
    return ReferenceTrajectory(times=times, states=states, inputs=inputs)


def apply_disturbance(
    target: Union[StateLayout, SpineConfig],
    xi: np.ndarray,
    spec: DisturbanceSpec,
    step_index: int,
) -> np.ndarray:
    """Add zero-mean uniform noise to the scheduled state groups.

    Draws come from a generator seeded with (seed, step_index), so the
    perturbation at a given step does not depend on what ran before it.
    """
    xi = np.array(xi, dtype=float)
    if not spec.enabled:
        return xi
    if spec.schedule == "impulse" and step_index not in spec.impulse_steps:
        return xi

    layout = state_layout(target) if isinstance(target, SpineConfig) else target
    rng = np.random.default_rng([spec.seed, step_index])
    for group, magnitude in (("position", spec.position), ("angle", spec.angle), ("velocity", spec.velocity)):
        mask = layout.group_mask(group)
        noise = rng.uniform(-1.0, 1.0, size=int(mask.sum()))
        if magnitude > 0.0:
            xi[mask] += magnitude * noise
    return xi


def trajectory_to_frame(trajectory: ReferenceTrajectory) -> pd.DataFrame:
    n = trajectory.states.shape[1]
    frame = pd.DataFrame(trajectory.states, columns=[f"xi_{j}" for j in range(n)])
    frame.insert(0, "time", trajectory.times)
    if trajectory.inputs is not None:
        for j in range(trajectory.inputs.shape[1]):
            frame[f"uref_{j}"] = trajectory.inputs[:, j]
    return frame


def save_trajectory(trajectory: ReferenceTrajectory, path: Union[str, Path]) -> None:
    write_csv(trajectory_to_frame(trajectory), path)


def load_trajectory(path: Union[str, Path]) -> ReferenceTrajectory:
    """Read a trajectory written by save_trajectory."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise TrajectoryError(f"cannot read trajectory {path}: {e}") from e
    if "time" not in frame.columns:
        raise TrajectoryError(f"{path}: missing 'time' column")

    times = frame["time"].to_numpy(dtype=float)
    if times.size > 1 and np.any(np.diff(times) <= 0.0):
        raise TrajectoryError(f"{path}: times must be strictly increasing")
    state_cols = [c for c in frame.columns if c.startswith("xi_")]
    input_cols = [c for c in frame.columns if c.startswith("uref_")]
    return ReferenceTrajectory(
        times=times,
        states=frame[state_cols].to_numpy(dtype=float),
        inputs=frame[input_cols].to_numpy(dtype=float) if input_cols else None,
    )
