# 命令行入口
# Command-line harness: load an experiment, run it, write data files

import copy
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import typer
from loguru import logger
from rich.console import Console
from rich.table import Table

from app.core.config import settings
from app.core.exceptions import SimulationAbortedError, SpineMPCException
from app.core.logging import setup_logging
from app.models.numerics import SimulationLog
from app.models.schemas import ControllerKind, ExperimentConfig
from app.services.analytics_service import TrackingSummary, get_analytics_service
from app.services.simulation_service import (
    log_to_frame,
    prepare_experiment,
    run_closed_loop,
    timing_frame,
    xz_paths,
)
from app.services.trajgen import save_trajectory
from app.utils.io import atomic_write_text, parse_experiment, read_experiment_json, save_experiment, write_csv

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ABORTED = 2

console = Console()
cli = typer.Typer(add_completion=False, help="Receding-horizon control of a cable-driven tensegrity spine.")


class Toggle(str, Enum):
    ON = "on"
    OFF = "off"


def apply_overrides(
    raw: Dict[str, Any],
    controller: Optional[ControllerKind] = None,
    out: Optional[Path] = None,
    seed: Optional[int] = None,
    disturbance: Optional[Toggle] = None,
    steps: Optional[int] = None,
    timing: bool = False,
    dump_models: bool = False,
) -> Dict[str, Any]:
    """Command-line flags win over the experiment file."""
    raw = copy.deepcopy(raw)
    if controller is not None:
        raw.setdefault("controller", {})["kind"] = controller.value
    if seed is not None:
        raw.setdefault("disturbance", {})["seed"] = seed
    if disturbance is not None:
        raw.setdefault("disturbance", {})["enabled"] = disturbance == Toggle.ON
    run = raw.setdefault("run", {})
    if out is not None:
        run["output_dir"] = str(out)
    if steps is not None:
        run["steps"] = steps
    if timing:
        run["write_timing"] = True
    if dump_models:
        run["dump_models"] = True
    return raw


def _echo(experiment: ExperimentConfig) -> Dict[str, Any]:
    kind = experiment.controller.kind
    echo: Dict[str, Any] = {"controller": kind.value}
    if kind == ControllerKind.REFERENCE:
        cfg = experiment.controller.reference
        echo.update(N=cfg.horizon, u_min=cfg.u_min, u_max=cfg.u_max, h=cfg.vertebra_height)
    else:
        cfg = experiment.controller.smoothing
        echo.update(N=cfg.horizon, u_min=cfg.u_min, u_max=cfg.u_max, w7=cfg.w7)
    echo["disturbance"] = "on" if experiment.disturbance.enabled else "off"
    echo["seed"] = experiment.disturbance.seed
    return echo


def _write_outputs(out: Path, experiment: ExperimentConfig, log: SimulationLog) -> TrackingSummary:
    analytics = get_analytics_service()
    write_csv(log_to_frame(log), out / "log.csv")
    write_csv(xz_paths(log), out / "xz_paths.csv")
    if experiment.run.write_timing:
        write_csv(timing_frame(log), out / "timing.csv")
    summary = analytics.tracking_metrics(log, experiment.run.transient_threshold)
    atomic_write_text(out / "metrics.txt", analytics.format_metrics(summary, _echo(experiment)))
    return summary


def execute(raw: Dict[str, Any], source: str = "config") -> Tuple[int, Optional[TrackingSummary]]:
    """Run one experiment into its output directory; returns (exit code, summary)."""
    experiment = parse_experiment(raw, source)
    out = Path(experiment.run.output_dir)
    run = prepare_experiment(experiment)

    save_experiment(experiment, out / "config_used.json")
    save_trajectory(run.trajectory, out / "trajectory_ref.csv")
    dump_dir = str(out / "models") if experiment.run.dump_models else None

    logger.info(f"▶ {experiment.controller.kind.value} controller, {run.steps} steps -> {out}")
    code = EXIT_OK
    try:
        log = run_closed_loop(
            run.plant,
            run.controller,
            run.trajectory,
            experiment.disturbance,
            steps=run.steps,
            dump_dir=dump_dir,
        )
    except SimulationAbortedError as e:
        logger.error(f"run aborted: {e.message}; writing partial outputs")
        log, code = e.log, EXIT_ABORTED

    summary = _write_outputs(out, experiment, log)
    logger.info(f"✔ wrote outputs to {out}")
    return code, summary


def _execute_quietly(raw: Dict[str, Any], source: str) -> Tuple[int, Optional[TrackingSummary], str]:
    try:
        code, summary = execute(raw, source)
        return code, summary, ""
    except SpineMPCException as e:
        return EXIT_INVALID, None, e.message


def _sweep(raw: Dict[str, Any], source: str, count: int) -> int:
    base = Path(raw.get("run", {}).get("output_dir", settings.output_dir))
    first_seed = raw.get("disturbance", {}).get("seed", 0)
    jobs = []
    for k in range(count):
        job = apply_overrides(raw, seed=first_seed + k, out=base / f"seed_{k}")
        jobs.append(job)

    summaries: Dict[str, TrackingSummary] = {}
    codes: List[int] = []
    with ProcessPoolExecutor(max_workers=settings.sweep_workers) as pool:
        futures = [pool.submit(_execute_quietly, job, source) for job in jobs]
        for k, future in enumerate(futures):
            code, summary, message = future.result()
            codes.append(code)
            if message:
                logger.error(f"seed_{k}: {message}")
            if summary is not None:
                summaries[f"seed_{k}"] = summary
    if summaries:
        write_csv(get_analytics_service().aggregate(summaries), base / "sweep_summary.csv")
    return max(codes, default=EXIT_OK)


def _show(summary: TrackingSummary) -> None:
    table = Table(title="tracking metrics")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key, value in summary.as_dict().items():
        table.add_row(key, "none" if value is None else f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)


@cli.command()
def run(
    config: Optional[Path] = typer.Option(None, "--config", help="experiment JSON file"),
    controller: Optional[ControllerKind] = typer.Option(None, "--controller", help="smoothing or reference"),
    out: Optional[Path] = typer.Option(None, "--out", help="output directory"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help="disturbance seed"),
    disturbance: Optional[Toggle] = typer.Option(None, "--disturbance", help="on or off"),
    steps: Optional[int] = typer.Option(None, "--steps", min=0, help="plant steps to simulate"),
    timing: bool = typer.Option(False, "--timing", help="also write timing.csv"),
    sweep: int = typer.Option(0, "--sweep", min=0, help="run N seeds concurrently into seed_<k>/"),
    dump_models: bool = typer.Option(False, "--dump-models", help="write A, B, c and the QP of every step"),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="overrides SPINE_MPC_LOG_LEVEL"),
) -> int:
    setup_logging(level=log_level)
    source = str(config) if config is not None else "defaults"
    try:
        raw = read_experiment_json(config) if config is not None else {}
        raw = apply_overrides(raw, controller, out, seed, disturbance, steps, timing, dump_models)
        if sweep:
            return _sweep(raw, source, sweep)
        code, summary = execute(raw, source)
    except SpineMPCException as e:
        logger.error(e.message)
        return EXIT_INVALID
    if summary is not None:
        _show(summary)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = typer.main.get_command(cli)
    try:
        result = command.main(args=list(argv) if argv is not None else None, prog_name="spine-mpc", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except click.exceptions.Abort:
        return EXIT_INVALID
    return int(result or 0)
