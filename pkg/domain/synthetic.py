"""Model-consistent synthetic ensemble forecasts.

For each (valid time, location) one (m, V) trajectory is simulated from the
longest horizon down to the shortest. At every horizon the ensemble members
are built so that the generating EMOS maps send their mean and spread back to
exactly (m_h, σ²_h), and the realization is an exact draw from the
shortest-horizon predictive law. Raw ensembles are miscalibrated whenever the
generating coefficients differ from (0, 1, 0, 1).
"""

import logging
from datetime import datetime, timedelta, timezone

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field, field_validator, model_validator

from domain.errors import ForecastInputError
from domain.forecast import (
    DEFAULT_SUBSTEPS,
    advance_state,
    draw_terminal,
    substep_increments,
    variance_from_factor,
)
from domain.models import (
    Dataset,
    EnsembleRecord,
    HorizonCoefficients,
    MeanTransform,
    ModelFamily,
    ModelParams,
    RhoSchedule,
    Variable,
)

logger = logging.getLogger(__name__)

FIRST_VALID_TIME: datetime = datetime(2024, 1, 3, 12, 0, tzinfo=timezone.utc)


class SyntheticTruth(BaseModel):
    """Generating parameters of a synthetic forecast archive."""

    family: ModelFamily
    variable: Variable
    b: float = Field(..., gt=0.0)
    rho: RhoSchedule
    coefficients: list[HorizonCoefficients] = Field(..., min_length=1)
    mean_range: tuple[float, float]
    factor_range: tuple[float, float]
    mean_transform: MeanTransform = MeanTransform.IDENTITY

    @field_validator("mean_range", "factor_range")
    @classmethod
    def validate_range(cls, v: tuple[float, float]) -> tuple[float, float]:
        """Ensure ranges are ordered."""
        if v[1] < v[0]:
            raise ValueError(f"Range must be ordered, got {v}")
        return v

    @model_validator(mode="after")
    def validate_truth(self) -> "SyntheticTruth":
        horizons: list[int] = [c.horizon_h for c in self.coefficients]
        if horizons != sorted(set(horizons)):
            raise ValueError(f"Horizons must be unique and sorted, got {horizons}")
        if self.factor_range[0] <= 0.0:
            raise ValueError("Initial uncertainty factor must be positive")
        if self.family.is_positive and self.mean_range[0] <= 0.0:
            raise ValueError(f"{self.family.value} needs a positive mean range")
        if any(c.a1 == 0.0 or c.d == 0.0 for c in self.coefficients):
            raise ValueError("Generating maps need a1 ≠ 0 and d > 0 to be invertible")
        return self

    @property
    def horizons(self) -> list[int]:
        return [c.horizon_h for c in self.coefficients]

    def model_params(self) -> ModelParams:
        """Dynamics with t = 0 at the longest horizon."""
        return ModelParams(
            family=self.family, b=self.b, rho=self.rho, delivery_time=float(self.horizons[-1])
        )


# Helper Functions
def _simulate_states(
    truth: SyntheticTruth, n: int, rng: np.random.Generator, substeps: int
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """(m, V) at every horizon, columns in ascending horizon order."""
    params: ModelParams = truth.model_params()
    horizons: list[int] = truth.horizons
    longest: int = horizons[-1]
    m: NDArray[np.float64] = rng.uniform(*truth.mean_range, size=n)
    V: NDArray[np.float64] = rng.uniform(*truth.factor_range, size=n)
    out_m: NDArray[np.float64] = np.empty((n, len(horizons)))
    out_v: NDArray[np.float64] = np.empty((n, len(horizons)))
    out_m[:, -1] = m
    out_v[:, -1] = V

    t_prev: float = 0.0
    for column in range(len(horizons) - 2, -1, -1):
        t_next: float = float(longest - horizons[column])
        for dtheta in substep_increments(params=params, t0=t_prev, t1=t_next, substeps=substeps):
            z_mean = rng.standard_normal(n)
            z_var = rng.standard_normal(n)
            m, V = advance_state(
                family=truth.family, b=truth.b, m=m, V=V,
                dtheta=dtheta, z_mean=z_mean, z_var=z_var,
            )
        out_m[:, column] = m
        out_v[:, column] = V
        t_prev = t_next
    return out_m, out_v


def _standardized(rng: np.random.Generator, shape: tuple[int, int]) -> NDArray[np.float64]:
    """Normal rows shifted and scaled to mean 0 and population variance 1."""
    z: NDArray[np.float64] = rng.standard_normal(shape)
    z -= z.mean(axis=1, keepdims=True)
    z /= z.std(axis=1, keepdims=True)
    return z


def _log_members(
    log_mean: NDArray[np.float64], spread: NDArray[np.float64], z: NDArray[np.float64]
) -> NDArray[np.float64]:
    """
    Members exp(log_mean + s·z) with s solved row-wise so that the raw
    population variance equals `spread`.
    """
    center: NDArray[np.float64] = log_mean[:, None]

    def excess(s: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.exp(center + s[:, None] * z).var(axis=1) - spread

    lo: NDArray[np.float64] = np.zeros_like(spread)
    hi: NDArray[np.float64] = np.ones_like(spread)
    for _ in range(60):
        short: NDArray[np.bool_] = excess(hi) < 0.0
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    for _ in range(100):
        mid: NDArray[np.float64] = 0.5 * (lo + hi)
        below: NDArray[np.bool_] = excess(mid) < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.exp(center + (0.5 * (lo + hi))[:, None] * z)


def ensemble_members(
    coeffs: HorizonCoefficients,
    m: NDArray[np.float64],
    sigma2: NDArray[np.float64],
    z: NDArray[np.float64],
    transform: MeanTransform = MeanTransform.IDENTITY,
) -> NDArray[np.float64]:
    """
    Members whose statistics the EMOS maps send to (m, σ²).

    Args:
        coeffs: Generating coefficients of the horizon
        m: Predictive means
        sigma2: Predictive variances, each above coeffs.c
        z: Standardized shapes, one row per record
        transform: Scale of the mean map
    """
    spread: NDArray[np.float64] = (sigma2 - coeffs.c) / coeffs.d
    if np.any(spread < 0.0):
        raise ForecastInputError(f"σ² below c at horizon {coeffs.horizon_h}h")
    if transform == MeanTransform.LOG:
        log_mean: NDArray[np.float64] = (np.log(m) - coeffs.a0) / coeffs.a1
        return _log_members(log_mean=log_mean, spread=spread, z=z)
    mean: NDArray[np.float64] = (m - coeffs.a0) / coeffs.a1
    return mean[:, None] + np.sqrt(spread)[:, None] * z


def generate_dataset(
    truth: SyntheticTruth,
    n_issue: int,
    n_locations: int,
    n_members: int,
    seed: int = 0,
    substeps: int = DEFAULT_SUBSTEPS,
) -> Dataset:
    """
    Simulate a joined forecast archive from known parameters.

    Trajectories are never redrawn, so every horizon keeps the unconditional
    law of its state. Where σ²_h falls to c or below the ensemble cannot carry
    it: the members collapse onto the mean and the map reports σ² = c.

    Args:
        truth: Generating family, dynamics and EMOS maps
        n_issue: Number of daily valid times
        n_locations: Number of locations
        n_members: Ensemble size M
        seed: Seed of the single generator used throughout
        substeps: Euler sub-steps between consecutive horizons

    Returns:
        Dataset with n_issue·n_locations records per horizon
    """
    if n_issue < 1 or n_locations < 1 or n_members < 2:
        raise ForecastInputError("Need n_issue ≥ 1, n_locations ≥ 1 and n_members ≥ 2")
    rng: np.random.Generator = np.random.default_rng(seed)
    needed: int = n_issue * n_locations
    floors: NDArray[np.float64] = np.asarray([c.c for c in truth.coefficients])

    m, V = _simulate_states(truth=truth, n=needed, rng=rng, substeps=substeps)
    sigma2: NDArray[np.float64] = variance_from_factor(family=truth.family, m=m, V=V)
    collapsed: NDArray[np.bool_] = sigma2 <= floors
    if np.any(collapsed):
        logger.info(
            "%d of %d records sit at the variance floor c and get zero spread",
            int(collapsed.sum()), collapsed.size,
        )
    sigma2 = np.maximum(sigma2, floors)

    realized: NDArray[np.float64] = draw_terminal(
        family=truth.family, b=truth.b, m=m[:, 0], V=V[:, 0], rng=rng
    )
    members: list[NDArray[np.float64]] = [
        ensemble_members(
            coeffs=coeffs,
            m=m[:, column],
            sigma2=sigma2[:, column],
            z=_standardized(rng=rng, shape=(needed, n_members)),
            transform=truth.mean_transform,
        )
        for column, coeffs in enumerate(truth.coefficients)
    ]

    records: list[EnsembleRecord] = []
    for j in range(n_issue):
        valid_time: datetime = FIRST_VALID_TIME + timedelta(days=j)
        for k in range(n_locations):
            path: int = j * n_locations + k
            for column, horizon in enumerate(truth.horizons):
                records.append(
                    EnsembleRecord(
                        issue_time=valid_time - timedelta(hours=horizon),
                        horizon_h=horizon,
                        location=f"S{k:03d}",
                        members=members[column][path].tolist(),
                        realization=float(realized[path]),
                    )
                )
    logger.info(
        "generated %d synthetic %s records over %d horizons",
        len(records), truth.variable.value, len(truth.horizons),
    )
    return Dataset(variable=truth.variable, records=records)
