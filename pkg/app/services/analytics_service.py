# 跟踪性能分析服务
# Tracking analytics over simulation logs

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from app.core.logging import get_logger
from app.models.numerics import SimulationLog

logger = get_logger("app.analytics")

_VIOLATION_TOLERANCE = 1e-9


@dataclass
class TrackingSummary:
    """Per-vertebra position error statistics plus constraint bookkeeping."""

    steps: int
    position_max: List[float] = field(default_factory=list)
    position_mean: List[float] = field(default_factory=list)
    position_final: List[float] = field(default_factory=list)
    angle_max: List[float] = field(default_factory=list)
    transient_time: Optional[float] = 0.0
    input_violations: int = 0
    collision_violations: int = 0
    failed_steps: int = 0
    max_model_mismatch: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {"steps": self.steps}
        for name in ("position_max", "position_mean", "position_final", "angle_max"):
            for body, value in enumerate(getattr(self, name), start=1):
                flat[f"{name}_{body}"] = value
        rest = asdict(self)
        for name in ("transient_time", "input_violations", "collision_violations", "failed_steps", "max_model_mismatch"):
            flat[name] = rest[name]
        return flat


class AnalyticsService:
    """Turns SimulationLogs into summaries and metric files."""

    def __init__(self, transient_threshold: float = 5e-3):
        self.transient_threshold = transient_threshold

    def tracking_metrics(self, log: SimulationLog, threshold: Optional[float] = None) -> TrackingSummary:
        threshold = self.transient_threshold if threshold is None else threshold
        bodies = log.layout.num_bodies
        if len(log) == 0:
            zeros = [0.0] * bodies
            return TrackingSummary(steps=0, position_max=zeros, position_mean=zeros, position_final=zeros, angle_max=zeros)

        position = np.column_stack([log.column(f"pos_err_{b + 1}") for b in range(bodies)])
        angle = np.column_stack([log.column(f"ang_err_{b + 1}") for b in range(bodies)])
        times = log.column("time")

        # settled once the worst vertebra stays below threshold for the rest of the run
        above = position.max(axis=1) > threshold
        if not above.any():
            transient: Optional[float] = 0.0
        elif above[-1]:
            transient = None
        else:
            transient = float(times[int(np.flatnonzero(above)[-1]) + 1])

        summary = TrackingSummary(
            steps=len(log),
            position_max=position.max(axis=0).tolist(),
            position_mean=position.mean(axis=0).tolist(),
            position_final=position[-1].tolist(),
            angle_max=angle.max(axis=0).tolist(),
            transient_time=transient,
            input_violations=int(np.sum(log.column("input_violation") > _VIOLATION_TOLERANCE)),
            collision_violations=int(np.sum(log.column("collision_violation") > _VIOLATION_TOLERANCE)),
            failed_steps=int(np.sum(log.column("status") != "optimal")),
            max_model_mismatch=float(np.max(log.column("model_mismatch"))),
        )
        if summary.input_violations or summary.collision_violations:
            logger.warning(
                f"constraint violations: {summary.input_violations} input, {summary.collision_violations} collision"
            )
        return summary

    def format_metrics(self, summary: TrackingSummary, echo: Optional[Dict[str, Any]] = None) -> str:
        """key=value lines; echoed run parameters come first."""
        lines = [f"{key}={_format_value(value)}" for key, value in (echo or {}).items()]
        lines += [f"{key}={_format_value(value)}" for key, value in summary.as_dict().items()]
        return "\n".join(lines) + "\n"

    def aggregate(self, summaries: Dict[str, TrackingSummary]) -> pd.DataFrame:
        """One row per run, for sweeps."""
        records = [{"run": name, **summary.as_dict()} for name, summary in summaries.items()]
        return pd.DataFrame(records)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


# 全局服务实例
analytics_service = AnalyticsService()


def get_analytics_service() -> AnalyticsService:
    return analytics_service


def tracking_metrics(log: SimulationLog, threshold: Optional[float] = None) -> TrackingSummary:
    return analytics_service.tracking_metrics(log, threshold)
