# 有限时域约束最优控制
# Constrained finite-time optimal control problems and the two controllers

"""CFTOC builders.

Both builders stack the decision vector as

    z = [xi_0 .. xi_N | u_0 .. u_M | s_0 .. s_N]

with the affine dynamics kept as equality constraints rather than condensed
away, so H and the constraint matrices stay block-sparse. The smoothing
problem carries one epigraph slack per stage for the infinity-norm input
deviation term; the reference problem carries none.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sparse

from app.core.exceptions import ControllerError, DimensionMismatchError
from app.core.logging import get_logger
from app.models.numerics import (
    AffineModel,
    HorizonSolution,
    Plant,
    QpProblem,
    QpSolution,
    QpStatus,
    ReferenceTrajectory,
    StateLayout,
)
from app.models.schemas import (
    ControllerKind,
    ExperimentConfig,
    ReferenceControllerConfig,
    SmoothingControllerConfig,
)
from app.services import qp_solver

logger = get_logger("app.cftoc")

_CLAMP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SmoothingStructure:
    """Index structure the smoothing CFTOC needs from the state layout."""

    pose_blocks: Tuple[Tuple[int, ...], ...]
    pose_bounds: Tuple[float, ...]
    z_indices: Tuple[int, ...]
    q_diag: np.ndarray
    s_diag: np.ndarray
    margin: float


def smoothing_structure(layout: StateLayout, cfg: SmoothingControllerConfig) -> SmoothingStructure:
    bounds = (cfg.w4, cfg.w5, cfg.w6)
    if layout.num_bodies > len(bounds):
        raise DimensionMismatchError(f"smoothing controller supports up to 3 vertebrae, got {layout.num_bodies}")

    q = np.zeros(layout.state_dim)
    s = np.zeros(layout.state_dim)
    blocks = []
    for body in range(layout.num_bodies):
        q[layout.position_slice(body)] = cfg.w9
        q[layout.angle_slice(body)] = cfg.w10
        s[layout.pose_slice(body)] = cfg.w11
        pose = layout.pose_slice(body)
        blocks.append(tuple(range(pose.start, pose.stop)))

    return SmoothingStructure(
        pose_blocks=tuple(blocks),
        pose_bounds=bounds[: layout.num_bodies],
        z_indices=tuple(layout.z_index(body) for body in range(layout.num_bodies)),
        q_diag=q,
        s_diag=s,
        margin=cfg.w7,
    )


def _power_diag(diag: np.ndarray, k: int) -> np.ndarray:
    # zero entries stay zero, also at k = 0
    out = np.zeros_like(diag)
    np.power(diag, k, out=out, where=diag != 0.0)
    return out


def _as_vector(value: np.ndarray, length: int, name: str) -> np.ndarray:
    value = np.asarray(value, dtype=float).reshape(-1)
    if value.shape[0] != length:
        raise DimensionMismatchError(f"{name} has {value.shape[0]} entries, expected {length}")
    return value


def _as_window(window: np.ndarray, rows: int, cols: int, name: str) -> np.ndarray:
    window = np.atleast_2d(np.asarray(window, dtype=float))
    if window.shape[0] < rows:
        raise DimensionMismatchError(f"{name} window has {window.shape[0]} samples, horizon needs {rows}")
    if window.shape[1] != cols:
        raise DimensionMismatchError(f"{name} window has width {window.shape[1]}, expected {cols}")
    return window[:rows]


def _row_block(n_cols: Sequence[int], **blocks) -> sparse.csr_matrix:
    """hstack blocks over (states, inputs, slacks), zero-filling missing ones."""
    names = ("x", "u", "s")
    rows = next(block.shape[0] for block in blocks.values())
    parts = []
    for name, cols in zip(names, n_cols):
        if cols == 0:
            continue
        block = blocks.get(name)
        parts.append(sparse.csr_matrix((rows, cols)) if block is None else sparse.csr_matrix(block))
    return sparse.hstack(parts, format="csr")


def _dynamics_equalities(
    model: AffineModel, xi_t: np.ndarray, horizon: int, input_stages: int, n_cols: Sequence[int]
) -> Tuple[sparse.csr_matrix, np.ndarray]:
    n = model.state_dim
    shift = sparse.eye(horizon, horizon + 1, k=1)
    stage = sparse.eye(horizon, horizon + 1)
    dyn_x = sparse.kron(shift, sparse.eye(n)) - sparse.kron(stage, sparse.csr_matrix(model.A))
    dyn_u = -sparse.kron(sparse.eye(horizon, input_stages), sparse.csr_matrix(model.B))
    init_x = sparse.hstack([sparse.eye(n), sparse.csr_matrix((n, horizon * n))])

    A_eq = sparse.vstack([_row_block(n_cols, x=init_x), _row_block(n_cols, x=dyn_x, u=dyn_u)], format="csr")
    b_eq = np.concatenate([xi_t, np.tile(model.c, horizon)])
    return A_eq, b_eq


def _tracking_cost(refs: np.ndarray, weights: List[np.ndarray]) -> Tuple[sparse.csr_matrix, np.ndarray, float]:
    """sum_k (x_k - r_k)' W_k (x_k - r_k) as 1/2 x'Hx + f'x + constant."""
    H = sparse.block_diag([sparse.diags(2.0 * w) for w in weights], format="csr")
    f = np.concatenate([-2.0 * w * r for w, r in zip(weights, refs)])
    constant = float(sum(r @ (w * r) for w, r in zip(weights, refs)))
    return H, f, constant


def build_smoothing_cftoc(
    model: AffineModel,
    xi_t: np.ndarray,
    u_prev: np.ndarray,
    xi_ref_window: np.ndarray,
    cfg: SmoothingControllerConfig,
    structure: Optional[SmoothingStructure] = None,
) -> QpProblem:
    """Smoothing CFTOC without an input reference.

    Stage weights Q^k and S^k raise every diagonal entry to the power k.
    The infinity norm of u_k - u_(k-1) enters through slacks s_k bounding
    every coordinate from both sides, with u_(-1) = u_prev.
    """
    n, m, N = model.state_dim, model.input_dim, cfg.horizon
    if structure is None:
        if n % 12:
            raise DimensionMismatchError(f"state dimension {n} is not a stack of 3-D vertebra blocks")
        structure = smoothing_structure(StateLayout(num_bodies=n // 12, position_dim=3, angle_dim=3), cfg)
    if structure.q_diag.shape[0] != n:
        raise DimensionMismatchError("smoothing structure does not match the model state dimension")

    xi_t = _as_vector(xi_t, n, "xi_t")
    u_prev = _as_vector(u_prev, m, "u_prev")
    refs = _as_window(xi_ref_window, N + 1, n, "state reference")

    nx, nu, ns = (N + 1) * n, (N + 1) * m, N + 1
    cols = (nx, nu, ns)

    # cost
    Hx, fx, constant = _tracking_cost(refs, [_power_diag(structure.q_diag, k) for k in range(N + 1)])
    diff = sparse.kron(sparse.eye(N, N + 1, k=1) - sparse.eye(N, N + 1), sparse.eye(n)).tocsr()
    s_weights = sparse.diags(np.concatenate([_power_diag(structure.s_diag, k) for k in range(1, N + 1)]))
    Hx = Hx + 2.0 * (diff.T @ s_weights @ diff)
    H = sparse.block_diag([Hx, sparse.csr_matrix((nu, nu)), sparse.csr_matrix((ns, ns))], format="csr")
    f = np.concatenate([fx, np.zeros(nu), np.full(ns, cfg.w8)])

    A_eq, b_eq = _dynamics_equalities(model, xi_t, N, N + 1, cols)

    blocks: List[sparse.csr_matrix] = []
    rhs: List[np.ndarray] = []

    # input box
    eye_u = sparse.eye(nu)
    blocks += [_row_block(cols, u=eye_u), _row_block(cols, u=-eye_u)]
    rhs += [np.full(nu, cfg.u_max), np.full(nu, -cfg.u_min)]

    # input smoothing: u_0 - u_prev, u_k - u_0 (k < N), u_N - u_0
    pattern = sparse.lil_matrix((N + 1, N + 1))
    pattern[0, 0] = 1.0
    for k in range(1, N + 1):
        pattern[k, k] = 1.0
        pattern[k, 0] = -1.0
    move = sparse.kron(pattern.tocsr(), sparse.eye(m))
    offset = np.concatenate([u_prev, np.zeros(N * m)])
    bound = np.concatenate([np.full(m, cfg.w1), np.full((N - 1) * m, cfg.w2), np.full(m, cfg.w3)])
    blocks += [_row_block(cols, u=move), _row_block(cols, u=-move)]
    rhs += [bound + offset, bound - offset]

    # state smoothing on pose entries, k = 1..N
    pose_index = np.concatenate([np.asarray(block, dtype=int) for block in structure.pose_blocks])
    pose_bound = np.concatenate([np.full(len(b), w) for b, w in zip(structure.pose_blocks, structure.pose_bounds)])
    select = sparse.csr_matrix((np.ones(pose_index.size), (np.arange(pose_index.size), pose_index)), shape=(pose_index.size, n))
    pose_step = sparse.kron(sparse.eye(N), select) @ diff
    blocks += [_row_block(cols, x=pose_step), _row_block(cols, x=-pose_step)]
    rhs += [np.tile(pose_bound, N), np.tile(pose_bound, N)]

    # collision ordering z_b + w7 <= z_(b+1), k = 1..N
    z = structure.z_indices
    if len(z) > 1:
        order = sparse.lil_matrix((len(z) - 1, n))
        for b in range(len(z) - 1):
            order[b, z[b]] = 1.0
            order[b, z[b + 1]] = -1.0
        collision = sparse.kron(sparse.eye(N, N + 1, k=1), order.tocsr())
        blocks.append(_row_block(cols, x=collision))
        rhs.append(np.full(collision.shape[0], -structure.margin))

    # epigraph: +-(u_k - u_(k-1)) <= s_k
    delta = sparse.kron(sparse.eye(N + 1) - sparse.eye(N + 1, k=-1), sparse.eye(m))
    spread = sparse.kron(sparse.eye(N + 1), np.ones((m, 1)))
    epi_offset = np.concatenate([u_prev, np.zeros(N * m)])
    blocks += [_row_block(cols, u=delta, s=-spread), _row_block(cols, u=-delta, s=-spread)]
    rhs += [epi_offset, -epi_offset]

    return QpProblem(
        H=H,
        f=f,
        A_ineq=sparse.vstack(blocks, format="csr"),
        b_ineq=np.concatenate(rhs),
        A_eq=A_eq,
        b_eq=b_eq,
        constant=constant,
        metadata={
            "kind": ControllerKind.SMOOTHING.value,
            "horizon": N,
            "state_dim": n,
            "input_dim": m,
            "input_stages": N + 1,
            "offsets": {"states": 0, "inputs": nx, "slacks": nx + nu},
            "u_min": cfg.u_min,
            "u_max": cfg.u_max,
        },
    )


def build_reference_cftoc(
    model: AffineModel,
    xi_t: np.ndarray,
    xi_ref_window: np.ndarray,
    u_ref_window: np.ndarray,
    cfg: ReferenceControllerConfig,
) -> QpProblem:
    """Tracking CFTOC with state and input references and a terminal cost."""
    n, m, N = model.state_dim, model.input_dim, cfg.horizon
    xi_t = _as_vector(xi_t, n, "xi_t")
    refs = _as_window(xi_ref_window, N + 1, n, "state reference")
    u_refs = _as_window(u_ref_window, N, m, "input reference")
    q, p, r = cfg.weight_diagonals(n, m)
    if q.shape[0] != n or p.shape[0] != n or r.shape[0] != m:
        raise DimensionMismatchError("Q, P or R diagonal does not match the model dimensions")

    nx, nu = (N + 1) * n, N * m
    cols = (nx, nu, 0)

    Hx, fx, cx = _tracking_cost(refs, [q] * N + [p])
    Hu, fu, cu = _tracking_cost(u_refs, [r] * N)
    H = sparse.block_diag([Hx, Hu], format="csr")
    f = np.concatenate([fx, fu])

    A_eq, b_eq = _dynamics_equalities(model, xi_t, N, N, cols)

    eye_u = sparse.eye(nu)
    blocks = [_row_block(cols, u=eye_u), _row_block(cols, u=-eye_u)]
    rhs = [np.full(nu, cfg.u_max), np.full(nu, -cfg.u_min)]

    violates = False
    if cfg.z_index is not None:
        if cfg.z_index >= n:
            raise DimensionMismatchError(f"z_index {cfg.z_index} outside a {n}-state model")
        floor = 0.5 * cfg.vertebra_height
        pick = sparse.csr_matrix(([-1.0], ([0], [cfg.z_index])), shape=(1, n))
        blocks.append(_row_block(cols, x=sparse.kron(sparse.eye(N + 1), pick)))
        rhs.append(np.full(N + 1, -floor))
        violates = bool(xi_t[cfg.z_index] < floor)
        if violates:
            logger.warning(f"initial state z = {xi_t[cfg.z_index]:.4f} is below h/2 = {floor:.4f}; QP is infeasible")

    return QpProblem(
        H=H,
        f=f,
        A_ineq=sparse.vstack(blocks, format="csr"),
        b_ineq=np.concatenate(rhs),
        A_eq=A_eq,
        b_eq=b_eq,
        constant=cx + cu,
        metadata={
            "kind": ControllerKind.REFERENCE.value,
            "horizon": N,
            "state_dim": n,
            "input_dim": m,
            "input_stages": N,
            "offsets": {"states": 0, "inputs": nx},
            "u_min": cfg.u_min,
            "u_max": cfg.u_max,
            "initial_state_violates_collision": violates,
        },
    )


def decode_horizon(problem: QpProblem, solution: QpSolution) -> HorizonSolution:
    meta = problem.metadata
    n, m, N = meta["state_dim"], meta["input_dim"], meta["horizon"]
    offsets = meta["offsets"]
    z = solution.z
    ou = offsets["inputs"]
    slacks = z[offsets["slacks"]:] if "slacks" in offsets else None
    return HorizonSolution(
        inputs=z[ou:ou + meta["input_stages"] * m].reshape(-1, m),
        states=z[:(N + 1) * n].reshape(N + 1, n),
        objective=solution.objective,
        status=solution.status,
        iterations=solution.iterations,
        u_min=meta["u_min"],
        u_max=meta["u_max"],
        slacks=slacks,
    )


def extract_first_input(sol: HorizonSolution) -> np.ndarray:
    """u_(t|t), clamped onto [u_min, u_max]."""
    if sol.status != QpStatus.OPTIMAL:
        raise ControllerError(f"no input from a {sol.status.value} horizon solution")
    u = sol.inputs[0]
    clamped = np.clip(u, sol.u_min, sol.u_max)
    distance = float(np.max(np.abs(clamped - u), initial=0.0))
    if distance > _CLAMP_TOLERANCE:
        logger.warning(f"first input clamped by {distance:.3e}")
    return clamped


class SmoothingController:
    """Receding-horizon controller over the smoothing CFTOC (state reference only)."""

    kind = ControllerKind.SMOOTHING
    has_input_reference = False

    def __init__(self, cfg: SmoothingControllerConfig, layout: StateLayout):
        self.cfg = cfg
        self.layout = layout
        self.structure = smoothing_structure(layout, cfg)

    @property
    def u_min(self) -> float:
        return self.cfg.u_min

    @property
    def u_max(self) -> float:
        return self.cfg.u_max

    def build(self, model: AffineModel, xi_t: np.ndarray, u_prev: np.ndarray, trajectory: ReferenceTrajectory, step_index: int) -> QpProblem:
        window = trajectory.state_window(step_index, self.cfg.horizon + 1)
        return build_smoothing_cftoc(model, xi_t, u_prev, window, self.cfg, self.structure)

    def plan(self, model, xi_t, u_prev, trajectory, step_index) -> Tuple[QpProblem, HorizonSolution]:
        problem = self.build(model, xi_t, u_prev, trajectory, step_index)
        return problem, decode_horizon(problem, qp_solver.solve(problem))

    def collision_violation(self, xi: np.ndarray) -> float:
        z = xi[list(self.structure.z_indices)]
        if z.shape[0] < 2:
            return 0.0
        return float(max(0.0, np.max(z[:-1] + self.structure.margin - z[1:])))


class ReferenceController:
    """Receding-horizon controller tracking state and input references."""

    kind = ControllerKind.REFERENCE
    has_input_reference = True

    def __init__(self, cfg: ReferenceControllerConfig):
        self.cfg = cfg

    @property
    def u_min(self) -> float:
        return self.cfg.u_min

    @property
    def u_max(self) -> float:
        return self.cfg.u_max

    def build(self, model, xi_t, u_prev, trajectory: ReferenceTrajectory, step_index: int) -> QpProblem:
        if trajectory.inputs is None:
            raise ControllerError("reference controller needs a trajectory with reference inputs")
        N = self.cfg.horizon
        return build_reference_cftoc(
            model,
            xi_t,
            trajectory.state_window(step_index, N + 1),
            trajectory.input_window(step_index, N),
            self.cfg,
        )

    def plan(self, model, xi_t, u_prev, trajectory, step_index) -> Tuple[QpProblem, HorizonSolution]:
        problem = self.build(model, xi_t, u_prev, trajectory, step_index)
        return problem, decode_horizon(problem, qp_solver.solve(problem))

    def collision_violation(self, xi: np.ndarray) -> float:
        if self.cfg.z_index is None:
            return 0.0
        return float(max(0.0, 0.5 * self.cfg.vertebra_height - xi[self.cfg.z_index]))


Controller = Union[SmoothingController, ReferenceController]


def build_controller(kind: ControllerKind, experiment: ExperimentConfig, plant: Plant) -> Controller:
    """Pick the controller for `kind`, checking it fits the plant."""
    if kind == ControllerKind.SMOOTHING:
        if plant.layout.position_dim != 3:
            raise ControllerError("smoothing controller needs the spatial3D model")
        return SmoothingController(experiment.controller.smoothing, plant.layout)
    if plant.layout.position_dim != 2 or plant.layout.num_bodies != 1:
        raise ControllerError("reference controller needs the planar2D single-vertebra model")
    return ReferenceController(experiment.controller.reference)
