# 有限差分线性化
# Finite-difference affine linearization

from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from app.core.config import get_settings
from app.core.exceptions import DimensionMismatchError
from app.core.logging import get_logger
from app.models.numerics import AffineModel, Plant
from app.models.schemas import SpineConfig
from app.services.spine_model import SpinePlant
from app.utils.io import atomic_write_text

settings = get_settings()
logger = get_logger("app.linearization")


def _as_plant(target: Union[Plant, SpineConfig]) -> Plant:
    return SpinePlant(target) if isinstance(target, SpineConfig) else target


def linearize(
    target: Union[Plant, SpineConfig],
    xi_t: np.ndarray,
    u_prev: np.ndarray,
    delta: Optional[float] = None,
) -> AffineModel:
    """Affine model of the discrete step map around (xi_t, u_prev).

    Columns of A and B are central differences of f = plant.step. Rest-length
    perturbations that would go negative are clamped at zero, which turns
    that column into a one-sided difference. c closes the identity
    A xi_t + B u_prev + c = f(xi_t, u_prev).
    """
    plant = _as_plant(target)
    delta = settings.fd_delta if delta is None else delta
    if delta <= 0:
        raise ValueError("finite-difference delta must be positive")

    xi_t = np.asarray(xi_t, dtype=float).reshape(-1)
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    n, m = plant.state_dim, plant.input_dim
    if xi_t.shape[0] != n or u_prev.shape[0] != m:
        raise DimensionMismatchError(f"operating point is ({xi_t.shape[0]}, {u_prev.shape[0]}), plant is ({n}, {m})")

    f0 = plant.step(xi_t, u_prev)

    A = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = delta
        A[:, j] = (plant.step(xi_t + e, u_prev) - plant.step(xi_t - e, u_prev)) / (2.0 * delta)

    B = np.empty((n, m))
    clamped = []
    for j in range(m):
        upper = u_prev.copy()
        lower = u_prev.copy()
        upper[j] += delta
        lower[j] = u_prev[j] - delta
        if isinstance(plant, SpinePlant) and lower[j] < 0.0:
            lower[j] = 0.0
            clamped.append(j)
        B[:, j] = (plant.step(xi_t, upper) - plant.step(xi_t, lower)) / (upper[j] - lower[j])

    if clamped:
        logger.warning(f"rest-length perturbation clamped at 0 for inputs {clamped}; one-sided differences used")

    c = f0 - A @ xi_t - B @ u_prev
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(c))):
        raise DimensionMismatchError("linearization produced non-finite entries")

    return AffineModel(A=A, B=B, c=c, xi_op=xi_t.copy(), u_op=u_prev.copy(), dt=plant.dt)


def dump_affine_model(model: AffineModel, directory: Union[str, Path], tag: str = "") -> None:
    """Write A, B and c as CSV files for offline inspection."""
    directory = Path(directory)
    suffix = f"_{tag}" if tag else ""
    for name, matrix in (("A", model.A), ("B", model.B), ("c", model.c[:, None])):
        frame = pd.DataFrame(matrix)
        atomic_write_text(directory / f"affine_model{suffix}_{name}.csv", frame.to_csv(index=False, header=False, lineterminator="\n"))
