import numpy as np
import pytest

from app.models.numerics import SimulationLog, StateLayout
from app.services.analytics_service import AnalyticsService, get_analytics_service, tracking_metrics

PLANAR = StateLayout(num_bodies=1, position_dim=2, angle_dim=1)


def _log(position_errors, layout=PLANAR, **overrides):
    log = SimulationLog(layout=layout, input_dim=4, has_input_reference=False)
    errors_by_step = np.asarray(position_errors, dtype=float)
    if errors_by_step.ndim == 1:
        errors_by_step = errors_by_step[:, None]
    for t, errors in enumerate(errors_by_step):
        row = {
            "step": t,
            "time": (t + 1) * 0.001,
            "status": "optimal",
            "model_mismatch": 0.0,
            "input_violation": 0.0,
            "collision_violation": 0.0,
        }
        for body, value in enumerate(errors, start=1):
            row[f"pos_err_{body}"] = value
            row[f"ang_err_{body}"] = 0.5 * value
        for key, values in overrides.items():
            row[key] = values[t]
        log.rows.append(row)
    return log


def test_all_zero_errors_give_zero_metrics():
    summary = tracking_metrics(_log(np.zeros(10)))
    assert summary.position_max == [0.0] and summary.position_mean == [0.0]
    assert summary.transient_time == 0.0
    assert (summary.input_violations, summary.collision_violations, summary.failed_steps) == (0, 0, 0)


def test_error_ramp_statistics():
    # 0.01, 0.009, ..., 0.001: mean 0.0055, max 0.01, final 0.001
    ramp = np.linspace(0.01, 0.001, 10)
    summary = AnalyticsService(transient_threshold=0.0055).tracking_metrics(_log(ramp))
    assert summary.position_max == pytest.approx([0.01])
    assert summary.position_mean == pytest.approx([0.0055])
    assert summary.position_final == pytest.approx([0.001])
    assert summary.angle_max == pytest.approx([0.005])
    # last sample above threshold is 0.006 at step 4, so settled from time 0.006
    assert summary.transient_time == pytest.approx(0.006)


def test_unsettled_run_has_no_transient_time():
    summary = tracking_metrics(_log([0.0, 0.0, 1.0]))
    assert summary.transient_time is None


def test_transient_follows_the_worst_vertebra():
    layout = StateLayout(num_bodies=2, position_dim=3, angle_dim=3)
    errors = np.array([[0.0, 0.02], [0.0, 0.02], [0.0, 0.001], [0.0, 0.001]])
    summary = tracking_metrics(_log(errors, layout=layout))
    assert summary.position_max == pytest.approx([0.0, 0.02])
    assert summary.transient_time == pytest.approx(0.003)


def test_violations_and_failures_are_counted():
    log = _log(
        np.zeros(4),
        input_violation=[0.0, 1e-12, 1e-3, 0.0],
        collision_violation=[0.0, 0.0, 0.0, 2e-3],
        status=["optimal", "infeasible", "optimal", "max_iterations"],
        model_mismatch=[1e-9, 3e-6, 0.0, 0.0],
    )
    summary = tracking_metrics(log)
    assert (summary.input_violations, summary.collision_violations, summary.failed_steps) == (1, 1, 2)
    assert summary.max_model_mismatch == pytest.approx(3e-6)


def test_empty_log_summarises_to_zeros():
    summary = tracking_metrics(SimulationLog(layout=PLANAR, input_dim=4, has_input_reference=True))
    assert summary.steps == 0
    assert summary.position_final == [0.0]


def test_metrics_text_is_key_value():
    service = get_analytics_service()
    text = service.format_metrics(tracking_metrics(_log([0.0, 1.0])), echo={"controller": "reference", "N": 4, "u_max": 0.3})
    lines = text.splitlines()
    assert lines[:3] == ["controller=reference", "N=4", "u_max=0.3"]
    assert "transient_time=none" in lines
    assert "position_max_1=1" in lines
    assert all("=" in line for line in lines)


def test_aggregate_has_one_row_per_run():
    service = AnalyticsService()
    frame = service.aggregate({"seed_0": tracking_metrics(_log([0.1])), "seed_1": tracking_metrics(_log([0.2]))})
    assert frame["run"].tolist() == ["seed_0", "seed_1"]
    assert frame["position_max_1"].tolist() == pytest.approx([0.1, 0.2])
