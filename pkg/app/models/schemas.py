# 实验配置模型
# Experiment Configuration Schemas

from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Dimension(str, Enum):
    """Spine model dimension"""

    PLANAR = "planar2D"
    SPATIAL = "spatial3D"


class ControllerKind(str, Enum):
    """CFTOC family"""

    SMOOTHING = "smoothing"  # 3-D, no input reference, smoothing constraints
    REFERENCE = "reference"  # 2-D, input reference from inverse kinematics


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# 脊柱几何与物理参数
class SpineConfig(_Section):
    """Geometry and physical constants of the cable-driven spine.

    The base vertebra is fixed at the origin pose; vertebra i (1-based) sits
    at height i * vertebra_spacing in the home pose. Every vertebra shares the
    same node_offsets (body frame) and every adjacent pair shares the same
    cable_routing, given as (lower-node, upper-node) index pairs.
    """

    dimension: Dimension = Field(description="planar2D or spatial3D")
    num_moving_vertebrae: int = Field(ge=1, description="moving vertebrae above the fixed base")
    vertebra_mass: float = Field(gt=0, description="kg")
    vertebra_inertia: List[float] = Field(description="kg m^2; one value in 2-D, principal diagonal in 3-D")
    vertebra_height: float = Field(gt=0, description="h, m")
    vertebra_spacing: float = Field(gt=0, description="home center-to-center distance, m")
    node_offsets: List[List[float]] = Field(description="attachment nodes in the body frame, m")
    cable_routing: List[Tuple[int, int]] = Field(description="(lower node, upper node) per cable of a pair")
    cable_stiffness: float = Field(gt=0, description="k_s, N/m")
    cable_damping: float = Field(ge=0, description="c_d, N s/m")
    gravity: float = Field(default=9.81, ge=0, description="m/s^2")
    dt: float = Field(default=0.001, gt=0, description="Euler step, s")

    @model_validator(mode="after")
    def _check_geometry(self) -> "SpineConfig":
        planar = self.dimension == Dimension.PLANAR
        coord_dim = 2 if planar else 3
        expected_cables = 4 if planar else 8
        expected_inertia = 1 if planar else 3

        if len(self.vertebra_inertia) != expected_inertia:
            raise ValueError(f"vertebra_inertia needs {expected_inertia} entries for {self.dimension.value}")
        if any(value <= 0 for value in self.vertebra_inertia):
            raise ValueError("vertebra_inertia entries must be positive")
        if len(self.cable_routing) != expected_cables:
            raise ValueError(
                f"{self.dimension.value} requires exactly {expected_cables} cables per vertebra pair, "
                f"got {len(self.cable_routing)}"
            )
        if len(self.node_offsets) < 2:
            raise ValueError("at least two attachment nodes are required")
        offsets = np.asarray(self.node_offsets, dtype=float)
        if offsets.ndim != 2 or offsets.shape[1] != coord_dim:
            raise ValueError(f"node_offsets must be {coord_dim}-vectors")
        if np.any(np.linalg.norm(offsets, axis=1) == 0.0):
            raise ValueError("node_offsets must be nonzero")
        if np.linalg.matrix_rank(offsets[1:] - offsets[0], tol=1e-12) < 2:
            raise ValueError("node_offsets are collinear; cables could not exert restoring moments")
        for lower, upper in self.cable_routing:
            if not (0 <= lower < len(offsets) and 0 <= upper < len(offsets)):
                raise ValueError(f"cable_routing index out of range: ({lower}, {upper})")
        return self

    @property
    def is_planar(self) -> bool:
        return self.dimension == Dimension.PLANAR

    @property
    def cables_per_pair(self) -> int:
        return len(self.cable_routing)

    @property
    def num_cables(self) -> int:
        return self.cables_per_pair * self.num_moving_vertebrae

    @classmethod
    def planar_default(cls) -> "SpineConfig":
        """Single moving vertebra, 2 vertical + 2 saddle cables."""
        return cls(
            dimension=Dimension.PLANAR,
            num_moving_vertebrae=1,
            vertebra_mass=0.5,
            vertebra_inertia=[0.005],
            vertebra_height=0.15,
            vertebra_spacing=0.10,
            node_offsets=[[-0.1, -0.05], [0.1, -0.05], [0.0, 0.1]],
            cable_routing=[(0, 0), (1, 1), (2, 0), (2, 1)],
            cable_stiffness=500.0,
            cable_damping=10.0,
        )

    @classmethod
    def spatial_default(cls) -> "SpineConfig":
        """Three moving vertebrae, 4 vertical + 4 saddle cables per pair."""
        return cls(
            dimension=Dimension.SPATIAL,
            num_moving_vertebrae=3,
            vertebra_mass=0.5,
            vertebra_inertia=[0.005, 0.005, 0.005],
            vertebra_height=0.15,
            vertebra_spacing=0.12,
            node_offsets=[
                [0.075, 0.0, -0.075],
                [-0.075, 0.0, -0.075],
                [0.0, 0.075, 0.075],
                [0.0, -0.075, 0.075],
            ],
            cable_routing=[(0, 0), (1, 1), (2, 2), (3, 3), (2, 0), (2, 1), (3, 0), (3, 1)],
            cable_stiffness=500.0,
            cable_damping=10.0,
        )


# 控制器参数
class SmoothingControllerConfig(_Section):
    """Weights of the smoothing CFTOC. w1..w11 are tuning seeds, not measured values."""

    horizon: int = Field(default=10, ge=1, description="N")
    u_min: float = Field(default=0.0)
    u_max: float = Field(default=0.3)
    w1: float = Field(default=0.1, ge=0, description="|u_t - u_(t-1)|_inf bound")
    w2: float = Field(default=0.02, ge=0, description="|u_(t+k) - u_t|_inf bound, k=1..N-1")
    w3: float = Field(default=0.02, ge=0, description="|u_(t+N) - u_t|_inf bound")
    w4: float = Field(default=0.005, ge=0, description="pose step bound, vertebra 1")
    w5: float = Field(default=0.005, ge=0, description="pose step bound, vertebra 2")
    w6: float = Field(default=0.005, ge=0, description="pose step bound, vertebra 3")
    w7: float = Field(default=0.08, gt=0, description="collision margin, m")
    w8: float = Field(default=1.0, ge=0, description="input deviation weight")
    w9: float = Field(default=4.0, ge=0, description="Q position weight")
    w10: float = Field(default=3.0, ge=0, description="Q angle weight")
    w11: float = Field(default=2.0, ge=0, description="S pose weight")

    @model_validator(mode="after")
    def _check_bounds(self) -> "SmoothingControllerConfig":
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be smaller than u_max")
        return self


class ReferenceControllerConfig(_Section):
    """Input-reference CFTOC. Omitted diagonals mean Q = P = I and R = 2I."""

    horizon: int = Field(default=4, ge=1, description="N")
    u_min: float = Field(default=0.0)
    u_max: float = Field(default=0.3)
    vertebra_height: float = Field(default=0.15, gt=0, description="h; z >= h/2")
    z_index: Optional[int] = Field(default=1, ge=0, description="state index bounded below by h/2")
    q_diag: Optional[List[float]] = Field(default=None)
    p_diag: Optional[List[float]] = Field(default=None)
    r_diag: Optional[List[float]] = Field(default=None)

    @model_validator(mode="after")
    def _check_weights(self) -> "ReferenceControllerConfig":
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be smaller than u_max")
        for name in ("q_diag", "p_diag", "r_diag"):
            values = getattr(self, name)
            if values is not None and any(v < 0 for v in values):
                raise ValueError(f"{name} must be nonnegative (PSD diagonal)")
        return self

    def weight_diagonals(self, n: int, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(Q, P, R) diagonals sized for an n-state, m-input model."""
        q = np.ones(n) if self.q_diag is None else np.asarray(self.q_diag, dtype=float)
        p = np.ones(n) if self.p_diag is None else np.asarray(self.p_diag, dtype=float)
        r = 2.0 * np.ones(m) if self.r_diag is None else np.asarray(self.r_diag, dtype=float)
        return q, p, r


class ControllerSection(_Section):
    kind: ControllerKind = Field(default=ControllerKind.REFERENCE)
    smoothing: SmoothingControllerConfig = Field(default_factory=SmoothingControllerConfig)
    reference: ReferenceControllerConfig = Field(default_factory=ReferenceControllerConfig)


# 参考轨迹
class TrajectoryConfig(_Section):
    sweep_angle: float = Field(default=0.3, description="total counterclockwise bend, rad")
    duration: float = Field(default=10.0, gt=0, description="cosine ramp duration, s")
    hold: float = Field(default=0.0, ge=0, description="time held at the final pose, s")


# 扰动
class DisturbanceSpec(_Section):
    """Uniform additive state noise, zero mean, reproducible per (seed, step)."""

    enabled: bool = Field(default=False)
    seed: int = Field(default=0, ge=0)
    position: float = Field(default=0.0, ge=0, description="m")
    angle: float = Field(default=0.0, ge=0, description="rad")
    velocity: float = Field(default=0.0, ge=0, description="m/s and rad/s")
    schedule: Literal["every_step", "impulse"] = Field(default="every_step")
    impulse_steps: List[int] = Field(default_factory=list)


class RunConfig(_Section):
    steps: Optional[int] = Field(default=None, ge=0, description="None runs the whole trajectory")
    output_dir: str = Field(default="runs/latest")
    transient_threshold: float = Field(default=5e-3, gt=0, description="m")
    write_timing: bool = Field(default=False)
    dump_models: bool = Field(default=False)


class ExperimentConfig(_Section):
    """Top-level experiment file."""

    spine: Optional[SpineConfig] = Field(default=None)
    controller: ControllerSection = Field(default_factory=ControllerSection)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    disturbance: DisturbanceSpec = Field(default_factory=DisturbanceSpec)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _check_controller_model(self) -> "ExperimentConfig":
        if self.spine is None:
            return self
        if self.controller.kind == ControllerKind.SMOOTHING:
            if self.spine.is_planar or self.spine.num_moving_vertebrae != 3:
                raise ValueError("smoothing controller needs the spatial3D model with 3 moving vertebrae")
        elif not self.spine.is_planar or self.spine.num_moving_vertebrae != 1:
            raise ValueError("reference controller needs the planar2D model with 1 moving vertebra")
        return self

    def resolved_spine(self) -> SpineConfig:
        if self.spine is not None:
            return self.spine
        if self.controller.kind == ControllerKind.SMOOTHING:
            return SpineConfig.spatial_default()
        return SpineConfig.planar_default()
