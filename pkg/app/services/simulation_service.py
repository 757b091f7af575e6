# 闭环仿真服务
# Closed-loop receding-horizon simulation

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from app.core.config import get_settings
from app.core.exceptions import SimulationAbortedError, SolverError
from app.core.logging import get_logger
from app.models.numerics import Plant, QpStatus, ReferenceTrajectory, SimulationLog
from app.models.schemas import ControllerKind, DisturbanceSpec, ExperimentConfig
from app.services.cftoc import Controller, build_controller, extract_first_input
from app.services.inverse_kinematics import ik_trajectory
from app.services.linearization import dump_affine_model, linearize
from app.services.spine_model import SpinePlant
from app.services.trajgen import apply_disturbance, generate_bend
from app.utils.io import dump_qp_problem

settings = get_settings()
logger = get_logger("app.simulation")


def run_closed_loop(
    plant: Plant,
    controller: Controller,
    traj: ReferenceTrajectory,
    disturbance: Optional[DisturbanceSpec] = None,
    steps: Optional[int] = None,
    max_consecutive_failures: Optional[int] = None,
    xi0: Optional[np.ndarray] = None,
    dump_dir: Optional[str] = None,
) -> SimulationLog:
    """linearize -> build CFTOC -> solve -> apply u_(t|t) -> step plant -> log.

    With dump_dir set, every step also writes its affine model (three CSV
    files) and its QP (qp_<step>.txt, readable by load_qp_problem).

    A non-optimal QP holds the previous input and marks the row; more than
    max_consecutive_failures failures in a row raise SimulationAbortedError
    carrying the partial log. Each row holds the state reached by the step
    and the reference at that same time.
    """
    disturbance = disturbance or DisturbanceSpec()
    steps = len(traj) - 1 if steps is None else steps
    limit = settings.max_consecutive_failures if max_consecutive_failures is None else max_consecutive_failures
    layout = plant.layout

    xi = np.array(traj.states[0] if xi0 is None else xi0, dtype=float)
    u_prev = np.zeros(plant.input_dim)
    log = SimulationLog(
        layout=layout,
        input_dim=plant.input_dim,
        has_input_reference=controller.has_input_reference,
        metadata={
            "controller": controller.kind.value,
            "horizon": controller.cfg.horizon,
            "u_min": controller.u_min,
            "u_max": controller.u_max,
            "steps": steps,
            "dt": plant.dt,
            "max_linearization_residual": 0.0,
            "failed_steps": 0,
        },
    )

    failures = 0
    for t in range(steps):
        model = linearize(plant, xi, u_prev)
        residual = float(np.max(np.abs(model.predict(xi, u_prev) - plant.step(xi, u_prev))))
        log.metadata["max_linearization_residual"] = max(log.metadata["max_linearization_residual"], residual)
        if dump_dir is not None:
            dump_affine_model(model, dump_dir, tag=f"{t:06d}")

        started = time.perf_counter()
        try:
            problem, horizon = controller.plan(model, xi, u_prev, traj, t)
            status, objective, iterations = horizon.status, horizon.objective, horizon.iterations
        except SolverError as e:
            logger.warning(f"step {t}: solver error: {e.message}")
            problem, horizon, status, objective, iterations = None, None, QpStatus.MAX_ITERATIONS, float("nan"), 0
        wall_time = time.perf_counter() - started
        if dump_dir is not None and problem is not None:
            dump_qp_problem(problem, Path(dump_dir) / f"qp_{t:06d}.txt")

        if horizon is not None and status == QpStatus.OPTIMAL:
            u = extract_first_input(horizon)
            failures = 0
        else:
            u = u_prev.copy()
            failures += 1
            log.metadata["failed_steps"] += 1
            logger.warning(f"step {t}: QP {status.value}, holding previous input ({failures} in a row)")
        predicted = model.predict(xi, u)

        xi_next = apply_disturbance(layout, plant.step(xi, u), disturbance, t)
        ref = traj.state_window(t + 1, 1)[0]

        row = {
            "step": t,
            "time": (t + 1) * plant.dt,
            "status": status.value,
            "objective": objective,
            "iterations": iterations,
            "wall_time": wall_time,
        }
        for body in range(layout.num_bodies):
            pos, ang = layout.position_slice(body), layout.angle_slice(body)
            row[f"pos_err_{body + 1}"] = float(np.linalg.norm(xi_next[pos] - ref[pos]))
            row[f"ang_err_{body + 1}"] = float(np.linalg.norm(xi_next[ang] - ref[ang]))
        row["model_mismatch"] = float(np.max(np.abs(xi_next - predicted)))
        row["input_violation"] = float(max(0.0, controller.u_min - u.min(), u.max() - controller.u_max))
        row["collision_violation"] = controller.collision_violation(xi_next)
        row.update({f"u_{j}": u[j] for j in range(plant.input_dim)})
        row.update({f"xi_{j}": xi_next[j] for j in range(layout.state_dim)})
        row.update({f"ref_{j}": ref[j] for j in range(layout.state_dim)})
        if controller.has_input_reference:
            u_ref = traj.input_window(t, 1)[0]
            row.update({f"uref_{j}": u_ref[j] for j in range(plant.input_dim)})
        log.rows.append(row)

        if failures > limit:
            logger.error(f"aborting after {failures} consecutive QP failures at step {t}")
            raise SimulationAbortedError(
                f"{failures} consecutive QP failures at step {t}",
                log=log,
                details={"step": t, "limit": limit},
            )

        xi, u_prev = xi_next, u
    return log


def log_to_frame(log: SimulationLog, include_timing: bool = False) -> pd.DataFrame:
    columns = log.columns(include_timing)
    return pd.DataFrame([{c: row[c] for c in columns} for row in log.rows], columns=columns)


def timing_frame(log: SimulationLog) -> pd.DataFrame:
    return pd.DataFrame(
        [{"step": row["step"], "wall_time": row["wall_time"], "iterations": row["iterations"]} for row in log.rows],
        columns=["step", "wall_time", "iterations"],
    )


def xz_paths(log: SimulationLog) -> pd.DataFrame:
    """Per-vertebra x-z paths of the plant and the reference."""
    layout = log.layout
    columns = ["step", "time"]
    for body in range(layout.num_bodies):
        i = body + 1
        columns += [f"x_{i}", f"z_{i}", f"x_ref_{i}", f"z_ref_{i}"]

    records = []
    for row in log.rows:
        record = {"step": row["step"], "time": row["time"]}
        for body in range(layout.num_bodies):
            x_index = layout.position_slice(body).start
            z_index = layout.z_index(body)
            i = body + 1
            record[f"x_{i}"] = row[f"xi_{x_index}"]
            record[f"z_{i}"] = row[f"xi_{z_index}"]
            record[f"x_ref_{i}"] = row[f"ref_{x_index}"]
            record[f"z_ref_{i}"] = row[f"ref_{z_index}"]
        records.append(record)
    return pd.DataFrame(records, columns=columns)


@dataclass
class ExperimentRun:
    plant: SpinePlant
    controller: Controller
    trajectory: ReferenceTrajectory
    steps: int


def prepare_experiment(experiment: ExperimentConfig, steps: Optional[int] = None) -> ExperimentRun:
    """Plant, controller and reference for one experiment file.

    Reference inputs are only computed for the samples the run can reach.
    """
    kind = experiment.controller.kind
    config = experiment.resolved_spine()
    plant = SpinePlant(config)
    controller = build_controller(kind, experiment, plant)

    margin = experiment.controller.smoothing.w7 if kind == ControllerKind.SMOOTHING else None
    trajectory = generate_bend(
        config,
        experiment.trajectory.sweep_angle,
        experiment.trajectory.duration,
        hold=experiment.trajectory.hold,
        collision_margin=margin,
    )
    total = len(trajectory) - 1
    steps = experiment.run.steps if steps is None else steps
    steps = total if steps is None else steps

    if controller.has_input_reference:
        needed = min(len(trajectory), steps + controller.cfg.horizon + 1)
        states = trajectory.states[:needed]
        inputs = ik_trajectory(config, states, u_max=controller.u_max)
        trajectory = ReferenceTrajectory(
            times=trajectory.times[:needed],
            states=states,
            inputs=inputs,
            sweep_angle=trajectory.sweep_angle,
            duration=trajectory.duration,
        )
    return ExperimentRun(plant=plant, controller=controller, trajectory=trajectory, steps=steps)


def run_experiment(
    experiment: ExperimentConfig,
    steps: Optional[int] = None,
    dump_dir: Optional[str] = None,
) -> Tuple[ExperimentRun, SimulationLog]:
    """(ExperimentRun, SimulationLog) for one experiment file."""
    run = prepare_experiment(experiment, steps)
    logger.info(
        f"running {run.controller.kind.value} controller for {run.steps} steps "
        f"(N={run.controller.cfg.horizon}, disturbance={'on' if experiment.disturbance.enabled else 'off'})"
    )
    log = run_closed_loop(
        run.plant,
        run.controller,
        run.trajectory,
        experiment.disturbance,
        steps=run.steps,
        dump_dir=dump_dir,
    )
    logger.info(f"finished {len(log)} steps, {log.metadata['failed_steps']} failed QPs")
    return run, log
