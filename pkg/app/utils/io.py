# 文件读写工具
# File I/O helpers: atomic writes, experiment JSON, QP text dumps

import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd
import scipy.sparse as sparse
from pydantic import ValidationError as PydanticValidationError

from app.core.exceptions import ConfigurationError, handle_validation_error
from app.models.numerics import QpProblem
from app.models.schemas import ExperimentConfig

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_csv(frame: pd.DataFrame, path: PathLike) -> None:
    """Comma separated, '.' decimal, header row, LF line endings."""
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n", float_format="%.12g"))


def read_experiment_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return raw


def load_experiment(path: PathLike) -> ExperimentConfig:
    return parse_experiment(read_experiment_json(path), source=str(path))


def parse_experiment(raw: Dict[str, Any], source: str = "config") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except PydanticValidationError as e:
        raise handle_validation_error(e, source) from e


def experiment_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    """Only the keys that were set, so a parsed file round-trips to itself."""
    return config.model_dump(mode="json", exclude_unset=True)


def save_experiment(config: ExperimentConfig, path: PathLike) -> None:
    atomic_write_text(path, json.dumps(experiment_to_dict(config), indent=2) + "\n")


# QP text format:
#   [name] rows cols      (matrix block, one row per line)
#   [name] length         (vector block, one line)
#   [constant] value
_QP_MATRICES = ("H", "A_ineq", "A_eq")
_QP_VECTORS = ("f", "b_ineq", "b_eq")


def _dense(matrix: Any) -> np.ndarray:
    return matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)


def dump_qp_problem(problem: QpProblem, path: PathLike) -> None:
    buffer = io.StringIO()
    for name in _QP_MATRICES:
        matrix = _dense(getattr(problem, name))
        buffer.write(f"[{name}] {matrix.shape[0]} {matrix.shape[1]}\n")
        if matrix.size:
            np.savetxt(buffer, matrix, fmt="%.17g")
    for name in _QP_VECTORS:
        vector = np.asarray(getattr(problem, name), dtype=float)
        buffer.write(f"[{name}] {vector.shape[0]}\n")
        if vector.size:
            np.savetxt(buffer, vector[None, :], fmt="%.17g")
    buffer.write(f"[constant] {problem.constant!r}\n")
    atomic_write_text(path, buffer.getvalue())


def load_qp_problem(path: PathLike) -> QpProblem:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    blocks: Dict[str, Any] = {}
    i = 0
    while i < len(lines):
        header = lines[i].split()
        i += 1
        if not header:
            continue
        name = header[0].strip("[]")
        if name == "constant":
            blocks[name] = float(header[1])
        elif name in _QP_MATRICES:
            rows, cols = int(header[1]), int(header[2])
            data = [np.array(lines[i + r].split(), dtype=float) for r in range(rows)]
            blocks[name] = np.array(data).reshape(rows, cols) if rows else np.zeros((0, cols))
            i += rows
        elif name in _QP_VECTORS:
            length = int(header[1])
            if length:
                blocks[name] = np.array(lines[i].split(), dtype=float)
                i += 1
            else:
                blocks[name] = np.zeros(0)
        else:
            raise ConfigurationError(f"{path}: unknown block [{name}]")
    return QpProblem(**blocks)
