import json
from pathlib import Path

import pytest

from app.cli import commands
from app.cli.commands import EXIT_ABORTED, EXIT_INVALID, EXIT_OK, apply_overrides, main
from app.core.exceptions import SimulationAbortedError
from app.models.numerics import SimulationLog, StateLayout

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


@pytest.fixture
def short_config(tmp_path) -> Path:
    raw = json.loads((CONFIG_DIR / "reference_2d.json").read_text())
    raw["trajectory"]["duration"] = 0.05
    raw["trajectory"]["hold"] = 0.0
    path = tmp_path / "short.json"
    path.write_text(json.dumps(raw))
    return path


def _metrics(out: Path) -> dict:
    lines = (out / "metrics.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


def test_zero_steps_writes_every_output(tmp_path, short_config):
    out = tmp_path / "run"
    assert main(["--config", str(short_config), "--out", str(out), "--steps", "0"]) == EXIT_OK
    for name in ("log.csv", "metrics.txt", "trajectory_ref.csv", "xz_paths.csv", "config_used.json"):
        assert (out / name).exists(), name
    header, *rows = (out / "log.csv").read_text().splitlines()
    assert header.startswith("step,time,status,objective,iterations,pos_err_1")
    assert rows == []
    assert _metrics(out)["steps"] == "0"


def test_metrics_echo_run_parameters(tmp_path, short_config):
    out = tmp_path / "run"
    assert main(["--config", str(short_config), "--out", str(out), "--steps", "3"]) == EXIT_OK
    metrics = _metrics(out)
    assert (metrics["controller"], metrics["N"], metrics["u_max"], metrics["h"]) == ("reference", "4", "0.3", "0.15")
    assert metrics["input_violations"] == "0"
    assert metrics["collision_violations"] == "0"
    assert len((out / "log.csv").read_text().splitlines()) == 4


def test_same_seed_gives_byte_identical_logs(tmp_path, short_config):
    args = ["--config", str(short_config), "--steps", "5", "--disturbance", "on", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()


def test_flags_override_the_file(tmp_path, short_config):
    out = tmp_path / "run"
    assert main(["--config", str(short_config), "--out", str(out), "--steps", "1", "--disturbance", "on", "--seed", "9"]) == EXIT_OK
    used = json.loads((out / "config_used.json").read_text())
    assert used["disturbance"]["seed"] == 9 and used["disturbance"]["enabled"] is True
    assert used["run"]["steps"] == 1


def test_timing_and_model_dumps(tmp_path, short_config):
    out = tmp_path / "run"
    assert main(["--config", str(short_config), "--out", str(out), "--steps", "2", "--timing", "--dump-models"]) == EXIT_OK
    assert (out / "timing.csv").exists()
    assert len(list((out / "models").iterdir())) == 8
    assert (out / "models" / "qp_000001.txt").exists()
    assert "wall_time" not in (out / "log.csv").read_text().splitlines()[0]


def test_unknown_key_exits_with_validation_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"run": {"stpes": 3}}))
    assert main(["--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_INVALID
    assert not (tmp_path / "run").exists()


def test_missing_config_exits_with_validation_code(tmp_path):
    assert main(["--config", str(tmp_path / "absent.json")]) == EXIT_INVALID


def test_smoothing_on_a_planar_spine_is_rejected(tmp_path, short_config):
    args = ["--config", str(short_config), "--controller", "smoothing", "--out", str(tmp_path / "run")]
    assert main(args) == EXIT_INVALID


def test_bad_flag_value_exits_with_validation_code():
    assert main(["--controller", "pid"]) == EXIT_INVALID


def test_aborted_run_exits_two_with_partial_outputs(tmp_path, short_config, monkeypatch):
    def abort(plant, controller, trajectory, *args, **kwargs):
        log = SimulationLog(layout=StateLayout(1, 2, 1), input_dim=4, has_input_reference=True)
        raise SimulationAbortedError("26 consecutive QP failures at step 25", log=log)

    monkeypatch.setattr(commands, "run_closed_loop", abort)
    out = tmp_path / "run"
    assert main(["--config", str(short_config), "--out", str(out), "--steps", "3"]) == EXIT_ABORTED
    assert (out / "log.csv").exists() and (out / "metrics.txt").exists()


def test_overrides_leave_the_input_untouched():
    raw = {"run": {"steps": 10}}
    updated = apply_overrides(raw, steps=2, out=Path("elsewhere"))
    assert raw == {"run": {"steps": 10}}
    assert updated["run"] == {"steps": 2, "output_dir": "elsewhere"}


@pytest.mark.slow
def test_sweep_runs_each_seed_into_its_own_directory(tmp_path, short_config):
    out = tmp_path / "sweep"
    args = ["--config", str(short_config), "--out", str(out), "--steps", "2", "--disturbance", "on", "--sweep", "2"]
    assert main(args) == EXIT_OK
    assert (out / "seed_0" / "log.csv").exists() and (out / "seed_1" / "log.csv").exists()
    assert (out / "sweep_summary.csv").read_text().splitlines()[0].startswith("run,steps")
    assert json.loads((out / "seed_1" / "config_used.json").read_text())["disturbance"]["seed"] == 1
