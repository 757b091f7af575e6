# 数值数据结构
# Numeric containers shared by the services

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
import scipy.sparse as sparse

from app.core.exceptions import DimensionMismatchError

MatrixLike = Union[np.ndarray, sparse.spmatrix]


@dataclass(frozen=True)
class StateLayout:
    """Index map of a stacked rigid-body state.

    Every body owns a contiguous block: positions, then angles, then their
    time derivatives in the same order.
    """

    num_bodies: int
    position_dim: int
    angle_dim: int

    @property
    def pose_dim(self) -> int:
        return self.position_dim + self.angle_dim

    @property
    def block(self) -> int:
        return 2 * self.pose_dim

    @property
    def state_dim(self) -> int:
        return self.num_bodies * self.block

    def pose_slice(self, body: int) -> slice:
        start = body * self.block
        return slice(start, start + self.pose_dim)

    def position_slice(self, body: int) -> slice:
        start = body * self.block
        return slice(start, start + self.position_dim)

    def angle_slice(self, body: int) -> slice:
        start = body * self.block + self.position_dim
        return slice(start, start + self.angle_dim)

    def velocity_slice(self, body: int) -> slice:
        start = body * self.block + self.pose_dim
        return slice(start, start + self.pose_dim)

    def z_index(self, body: int) -> int:
        """Vertical coordinate: the last position entry."""
        return body * self.block + self.position_dim - 1

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.state_dim, dtype=bool)
        for body in range(self.num_bodies):
            if group == "position":
                mask[self.position_slice(body)] = True
            elif group == "angle":
                mask[self.angle_slice(body)] = True
            elif group == "velocity":
                mask[self.velocity_slice(body)] = True
            else:
                raise ValueError(f"unknown state group: {group}")
        return mask


@runtime_checkable
class Plant(Protocol):
    """Discrete-time plant driven by the closed loop."""

    state_dim: int
    input_dim: int
    dt: float
    layout: StateLayout

    def step(self, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class AffineModel:
    """xi+ = A xi + B u + c, valid around (xi_op, u_op)."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    xi_op: np.ndarray
    u_op: np.ndarray
    dt: float

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def predict(self, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ xi + self.B @ u + self.c


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


def _as_matrix(value: Optional[MatrixLike], cols: int) -> MatrixLike:
    if value is None:
        return sparse.csr_matrix((0, cols))
    if sparse.issparse(value):
        return value.tocsr()
    array = np.atleast_2d(np.asarray(value, dtype=float))
    if array.size == 0:
        return np.zeros((0, cols))
    return array


def _as_vector(value: Optional[Sequence[float]]) -> np.ndarray:
    if value is None:
        return np.zeros(0)
    return np.asarray(value, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    """min 1/2 z'Hz + f'z + constant  s.t.  A_ineq z <= b_ineq,  A_eq z = b_eq."""

    H: MatrixLike
    f: np.ndarray
    A_ineq: Optional[MatrixLike] = None
    b_ineq: Optional[np.ndarray] = None
    A_eq: Optional[MatrixLike] = None
    b_eq: Optional[np.ndarray] = None
    constant: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.f = _as_vector(self.f)
        n = self.f.shape[0]
        self.H = self.H.tocsr() if sparse.issparse(self.H) else np.atleast_2d(np.asarray(self.H, dtype=float))
        self.A_ineq = _as_matrix(self.A_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq)

        if self.H.shape != (n, n):
            raise DimensionMismatchError(f"H is {self.H.shape}, expected {(n, n)}")
        if self.A_ineq.shape[1] != n or self.A_ineq.shape[0] != self.b_ineq.shape[0]:
            raise DimensionMismatchError("inequality system has inconsistent dimensions")
        if self.A_eq.shape[1] != n or self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise DimensionMismatchError("equality system has inconsistent dimensions")

        asym = self.H - self.H.T
        asym_norm = abs(asym).max() if sparse.issparse(asym) else np.max(np.abs(asym), initial=0.0)
        if asym_norm > 1e-12 * max(1.0, float(abs(self.H).max() if self.H.size else 0.0)):
            raise DimensionMismatchError(f"H is not symmetric (max asymmetry {asym_norm:.3e})")

    @property
    def n_z(self) -> int:
        return self.f.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.b_ineq.shape[0]

    @property
    def n_eq(self) -> int:
        return self.b_eq.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.H @ z) + self.f @ z + self.constant)


@dataclass
class QpSolution:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: QpStatus
    kkt_residual: float
    iterations: int
    objective: float

    @property
    def optimal(self) -> bool:
        return self.status == QpStatus.OPTIMAL


@dataclass
class HorizonSolution:
    """Decoded CFTOC solution: U = {u_t|t, ...}, predicted states, objective."""

    inputs: np.ndarray
    states: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    u_min: float
    u_max: float
    slacks: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Time-indexed reference states (and optionally reference inputs)."""

    times: np.ndarray
    states: np.ndarray
    inputs: Optional[np.ndarray] = None
    sweep_angle: float = 0.0
    duration: float = 0.0

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    def _clamped(self, start: int, count: int) -> np.ndarray:
        return np.minimum(np.arange(start, start + count), len(self) - 1)

    def state_window(self, start: int, count: int) -> np.ndarray:
        """count reference states from start; past the end the last sample repeats."""
        return self.states[self._clamped(start, count)]

    def input_window(self, start: int, count: int) -> np.ndarray:
        if self.inputs is None:
            raise DimensionMismatchError("reference trajectory carries no reference inputs")
        return self.inputs[self._clamped(start, count)]


@dataclass
class SimulationLog:
    """One row per plant step, in a fixed column order."""

    layout: StateLayout
    input_dim: int
    has_input_reference: bool
    metadata: Dict[str, Any] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def columns(self, include_timing: bool = False) -> List[str]:
        cols = ["step", "time", "status", "objective", "iterations"]
        if include_timing:
            cols.append("wall_time")
        for body in range(self.layout.num_bodies):
            cols.append(f"pos_err_{body + 1}")
            cols.append(f"ang_err_{body + 1}")
        cols += ["model_mismatch", "input_violation", "collision_violation"]
        cols += [f"u_{j}" for j in range(self.input_dim)]
        cols += [f"xi_{j}" for j in range(self.layout.state_dim)]
        cols += [f"ref_{j}" for j in range(self.layout.state_dim)]
        if self.has_input_reference:
            cols += [f"uref_{j}" for j in range(self.input_dim)]
        return cols

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.asarray([row[name] for row in self.rows])
