"""Domain models for forecast dynamics, calibration and trading."""

import math
from bisect import bisect_left
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Optional

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from domain.errors import ForecastInputError


class ModelFamily(str, Enum):
    """The four forecast-dynamics families."""

    STUDENT_T = "StudentT"
    NIG = "Nig"
    LOG_GH = "LogGh"
    LOG_NIG = "LogNig"

    @property
    def is_positive(self) -> bool:
        """Whether the forecast variable lives on (0, inf)."""
        return self in (ModelFamily.LOG_GH, ModelFamily.LOG_NIG)

    @property
    def is_symmetric(self) -> bool:
        """Whether the predictive law is symmetric about m."""
        return self in (ModelFamily.STUDENT_T, ModelFamily.NIG)

    @property
    def has_square_root_factor(self) -> bool:
        """V follows square-root (CIR-type) dynamics rather than a GBM."""
        return self in (ModelFamily.NIG, ModelFamily.LOG_NIG)


class Variable(str, Enum):
    """Forecast variable carried by a dataset."""

    TEMPERATURE = "temperature"
    WIND_SPEED = "wind_speed"
    LOG_WIND_SPEED = "log_wind_speed"

    @property
    def default_family(self) -> ModelFamily:
        if self == Variable.TEMPERATURE:
            return ModelFamily.NIG
        return ModelFamily.LOG_NIG


class MeanTransform(str, Enum):
    """Scale on which the EMOS mean regression is performed."""

    IDENTITY = "identity"
    LOG = "log"


class RhoEstimator(str, Enum):
    """Cross-horizon estimators of the piecewise-constant rate."""

    VARIANCE_RATIO = "variance_ratio"
    FACTOR_RATIO = "factor_ratio"
    LOG_MEAN_RATIO = "log_mean_ratio"


class VariantTag(str, Enum):
    """Trading forecast model: stochastic uncertainty (A) or constant diffusion (B)."""

    A = "A"
    B = "B"


class RhoSchedule(BaseModel):
    """
    Piecewise-constant rate ρ(τ) over lead time τ (hours).

    Value i applies on (breakpoints[i], breakpoints[i+1]]; the first and last
    values extend to shorter and longer lead times respectively.
    """

    model_config = ConfigDict(frozen=True)

    breakpoints: list[float] = Field(..., min_length=2)
    values: list[float] = Field(..., min_length=1)

    @field_validator("breakpoints")
    @classmethod
    def validate_breakpoints(cls, v: list[float]) -> list[float]:
        """Ensure lead times are non-negative and strictly increasing."""
        if v[0] < 0.0:
            raise ValueError("Lead-time breakpoints must be non-negative")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("Lead-time breakpoints must be strictly increasing")
        return v

    @field_validator("values")
    @classmethod
    def validate_values(cls, v: list[float]) -> list[float]:
        """Ensure every rate is strictly positive."""
        if any(not (r > 0.0) or not math.isfinite(r) for r in v):
            raise ValueError("Rates must be finite and strictly positive")
        return v

    @model_validator(mode="after")
    def validate_shape(self) -> "RhoSchedule":
        if len(self.values) != len(self.breakpoints) - 1:
            raise ValueError(
                f"Expected {len(self.breakpoints) - 1} rates for "
                f"{len(self.breakpoints)} breakpoints, got {len(self.values)}"
            )
        return self

    @classmethod
    def constant(cls, rho: float) -> "RhoSchedule":
        """Schedule with one rate at every lead time."""
        return cls(breakpoints=[0.0, 1.0], values=[rho])

    def rate(self, lead: float) -> float:
        """ρ at lead time `lead` (hours)."""
        index: int = bisect_left(self.breakpoints, lead) - 1
        index = min(max(index, 0), len(self.values) - 1)
        return self.values[index]

    def integral(self, lower: float, upper: float) -> float:
        """Exact ∫ ρ²(τ) dτ over lead times [lower, upper]."""
        if upper < lower:
            raise ForecastInputError(
                f"Integration bounds reversed: lower={lower}, upper={upper}"
            )
        interior: list[float] = [
            h for h in self.breakpoints[1:-1] if lower < h < upper
        ]
        edges: list[float] = [lower, *interior, upper]
        total: float = 0.0
        for a, b in zip(edges, edges[1:]):
            rho: float = self.rate(0.5 * (a + b))
            total += rho * rho * (b - a)
        return total


class ModelParams(BaseModel):
    """Family, shape and rate schedule: everything the dynamics depend on."""

    model_config = ConfigDict(frozen=True)

    family: ModelFamily
    b: float = Field(..., gt=0.0)
    rho: RhoSchedule
    delivery_time: float = Field(..., gt=0.0)

    @property
    def nu(self) -> float:
        """Gamma-mixture order 1 + 2/b² used by the StudentT and LogGh laws."""
        return 1.0 + 2.0 / (self.b * self.b)


class ForecastState(BaseModel):
    """Conditional mean m and uncertainty factor V at time t."""

    model_config = ConfigDict(frozen=True)

    t: float = Field(default=0.0, ge=0.0)
    m: float
    V: float = Field(..., ge=0.0)

    @field_validator("m", "V")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("State coordinates must be finite")
        return v


class NigCanonical(BaseModel):
    """Canonical (α, β, γ, δ, μ) parameters of a normal inverse Gaussian law."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(..., gt=0.0)
    beta: float
    gamma: float = Field(..., gt=0.0)
    delta: float = Field(..., ge=0.0)
    mu: float

    @model_validator(mode="after")
    def validate_consistency(self) -> "NigCanonical":
        if not self.alpha > abs(self.beta):
            raise ValueError(f"Need alpha > |beta|, got {self.alpha}, {self.beta}")
        expected: float = math.sqrt(self.alpha**2 - self.beta**2)
        if not math.isclose(self.gamma, expected, rel_tol=1e-9):
            raise ValueError(
                f"gamma must equal sqrt(alpha² - beta²) = {expected}, got {self.gamma}"
            )
        return self

    @classmethod
    def from_alpha_beta(
        cls, alpha: float, beta: float, delta: float, mu: float
    ) -> "NigCanonical":
        return cls(
            alpha=alpha,
            beta=beta,
            gamma=math.sqrt(alpha * alpha - beta * beta),
            delta=delta,
            mu=mu,
        )

    @property
    def mean(self) -> float:
        return self.mu + self.delta * self.beta / self.gamma

    @property
    def variance(self) -> float:
        return self.delta * self.alpha**2 / self.gamma**3


class PredictiveMoments(BaseModel):
    """Mean and variance of m_T given the current state."""

    mean: float
    variance: float = Field(..., ge=0.0)

    @property
    def finite_variance(self) -> bool:
        return math.isfinite(self.variance)


class PathSet(BaseModel):
    """Simulated (m, V) trajectories on a time grid."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    family: ModelFamily
    time_grid: list[float]
    m: NDArray[np.float64]
    V: NDArray[np.float64]
    seed: int

    @model_validator(mode="after")
    def validate_arrays(self) -> "PathSet":
        expected: tuple[int, int] = (self.m.shape[0], len(self.time_grid))
        if self.m.shape != expected or self.V.shape != expected:
            raise ValueError(
                f"Path arrays must have shape {expected}, got {self.m.shape} "
                f"and {self.V.shape}"
            )
        if np.any(self.V < 0.0):
            raise ValueError("Uncertainty factor V must be non-negative")
        return self

    @property
    def n_paths(self) -> int:
        return int(self.m.shape[0])

    def state(self, path_id: int, time_index: int) -> ForecastState:
        return ForecastState(
            t=self.time_grid[time_index],
            m=float(self.m[path_id, time_index]),
            V=float(self.V[path_id, time_index]),
        )

    def to_frame(self) -> pd.DataFrame:
        """Columnar layout: path_id, time, m, V."""
        n_paths, n_times = self.m.shape
        return pd.DataFrame(
            {
                "path_id": np.repeat(np.arange(n_paths), n_times),
                "time": np.tile(np.asarray(self.time_grid, dtype=np.float64), n_paths),
                "m": self.m.ravel(),
                "V": self.V.ravel(),
            }
        )


class EnsembleRecord(BaseModel):
    """One ensemble forecast, optionally joined with its realization."""

    issue_time: datetime
    horizon_h: int = Field(..., gt=0)
    location: str = Field(..., min_length=1)
    members: list[float] = Field(..., min_length=2)
    realization: Optional[float] = None

    @field_validator("members")
    @classmethod
    def validate_members(cls, v: list[float]) -> list[float]:
        """Ensure every member is a finite number."""
        if not all(math.isfinite(x) for x in v):
            raise ValueError("Ensemble members must be finite")
        return v

    @property
    def valid_time(self) -> datetime:
        return self.issue_time + timedelta(hours=self.horizon_h)

    @property
    def key(self) -> tuple[datetime, int, str]:
        return (self.issue_time, self.horizon_h, self.location)


class HorizonSample(BaseModel):
    """Array view of the joined records at one lead time."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    horizon_h: int
    members: NDArray[np.float64]
    realizations: NDArray[np.float64]
    valid_times: list[datetime]
    locations: list[str]

    @property
    def size(self) -> int:
        return int(self.members.shape[0])

    @property
    def pair_keys(self) -> list[tuple[datetime, str]]:
        return list(zip(self.valid_times, self.locations))


class Dataset(BaseModel):
    """Joined forecast/realization records for one variable."""

    variable: Variable
    records: list[EnsembleRecord]
    dropped: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_unique_keys(self) -> "Dataset":
        seen: set[tuple[datetime, int, str]] = set()
        for record in self.records:
            if record.key in seen:
                raise ValueError(f"Duplicate record key {record.key}")
            seen.add(record.key)
        return self

    @property
    def horizons(self) -> list[int]:
        return sorted({r.horizon_h for r in self.records})

    @property
    def n_issue_times(self) -> int:
        return len({r.issue_time for r in self.records})

    @property
    def n_locations(self) -> int:
        return len({r.location for r in self.records})

    def by_horizon(self, horizon_h: int) -> list[EnsembleRecord]:
        return [r for r in self.records if r.horizon_h == horizon_h]

    def for_locations(self, locations: list[str]) -> "Dataset":
        """Records of the given locations only; calibration pools whatever it is given."""
        wanted: set[str] = set(locations)
        unknown: set[str] = wanted - {r.location for r in self.records}
        if unknown:
            raise ForecastInputError(f"Unknown location(s): {sorted(unknown)}")
        return Dataset(
            variable=self.variable,
            records=[r for r in self.records if r.location in wanted],
            dropped=self.dropped,
        )

    def horizon_sample(self, horizon_h: int) -> HorizonSample:
        """
        Stack the joined records of one horizon into arrays.

        Raises:
            ForecastInputError: if the horizon is absent, a record lacks its
                realization, or ensemble sizes differ within the horizon
        """
        records: list[EnsembleRecord] = sorted(
            self.by_horizon(horizon_h), key=lambda r: (r.valid_time, r.location)
        )
        if not records:
            raise ForecastInputError(f"No records for horizon {horizon_h}h")
        sizes: set[int] = {len(r.members) for r in records}
        if len(sizes) != 1:
            raise ForecastInputError(
                f"Ensemble size varies within horizon {horizon_h}h: {sorted(sizes)}"
            )
        missing: list[EnsembleRecord] = [r for r in records if r.realization is None]
        if missing:
            raise ForecastInputError(
                f"{len(missing)} records at horizon {horizon_h}h have no realization"
            )
        return HorizonSample(
            horizon_h=horizon_h,
            members=np.asarray([r.members for r in records], dtype=np.float64),
            realizations=np.asarray([r.realization for r in records], dtype=np.float64),
            valid_times=[r.valid_time for r in records],
            locations=[r.location for r in records],
        )


class HorizonCoefficients(BaseModel):
    """EMOS coefficients and shape for one lead time."""

    horizon_h: int = Field(..., gt=0)
    a0: float
    a1: float
    c: float = Field(..., ge=0.0)
    d: float = Field(..., ge=0.0)
    b: float = Field(..., gt=0.0)


class CalibrationDiagnostics(BaseModel):
    """Fit bookkeeping reported alongside the coefficients."""

    loglik: dict[int, float] = Field(default_factory=dict)
    pooled_loglik: Optional[float] = None
    evaluations: dict[int, int] = Field(default_factory=dict)
    n_records: dict[int, int] = Field(default_factory=dict)
    rho_pairs: dict[str, int] = Field(default_factory=dict)
    rho_stderr: dict[str, float] = Field(default_factory=dict)
    unpaired: int = 0
    warnings: list[str] = Field(default_factory=list)


class CalibrationResult(BaseModel):
    """Output of the three-step calibration."""

    family: ModelFamily
    variable: Variable
    mean_transform: MeanTransform = MeanTransform.IDENTITY
    rho_estimator: RhoEstimator
    per_horizon: list[HorizonCoefficients] = Field(..., min_length=1)
    shared_b: float = Field(..., gt=0.0)
    rho: Optional[RhoSchedule] = None
    diagnostics: CalibrationDiagnostics = Field(default_factory=CalibrationDiagnostics)

    @model_validator(mode="after")
    def validate_horizons(self) -> "CalibrationResult":
        horizons: list[int] = [c.horizon_h for c in self.per_horizon]
        if horizons != sorted(set(horizons)):
            raise ValueError(f"Horizons must be unique and sorted, got {horizons}")
        if self.rho is not None and len(self.rho.values) != len(horizons) - 1:
            raise ValueError(
                f"Need one rate per adjacent horizon pair, got {len(self.rho.values)}"
            )
        return self

    @property
    def horizons(self) -> list[int]:
        return [c.horizon_h for c in self.per_horizon]

    def coefficients_for(self, horizon_h: int) -> HorizonCoefficients:
        for coeffs in self.per_horizon:
            if coeffs.horizon_h == horizon_h:
                return coeffs
        raise ForecastInputError(
            f"Horizon {horizon_h}h not calibrated (have {self.horizons})"
        )

    def model_params(self, delivery_time: float) -> ModelParams:
        """Dynamics implied by the shared shape and the estimated rates."""
        if self.rho is None:
            raise ForecastInputError("Calibration has no rate schedule")
        return ModelParams(
            family=self.family,
            b=self.shared_b,
            rho=self.rho,
            delivery_time=delivery_time,
        )


class LsmcConfig(BaseModel):
    """Regression Monte Carlo settings."""

    n_paths: int = Field(..., ge=1)
    cells_per_dim: int = Field(default=15, ge=1)
    control_grid: list[float] = Field(..., min_length=1)
    substeps: int = Field(default=100, ge=1)
    seed: int = 0

    @field_validator("control_grid")
    @classmethod
    def validate_grid(cls, v: list[float]) -> list[float]:
        """Ensure the control grid is strictly increasing."""
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("Control grid must be strictly increasing")
        return v

    def check_dimension(self, dim: int) -> None:
        """Every cell of a dim-dimensional partition must afford a regression."""
        needed: int = self.cells_per_dim**dim * (dim + 2)
        if self.n_paths < needed:
            raise ForecastInputError(
                f"{self.n_paths} paths cannot support {self.cells_per_dim}^{dim} "
                f"cells (need at least {needed})"
            )


class MarketParams(BaseModel):
    """Arithmetic Brownian price: dS = μ_S dt + σ_S dB, corr(B, W) = λ."""

    s0: float = 40.0
    mu_s: float = 0.0
    sigma_s: float = Field(default=6.0, ge=0.0)
    correlation: float = Field(default=-0.08, ge=-1.0, le=1.0)


class TradingConfig(BaseModel):
    """Wind-power intraday trading problem."""

    risk_aversion: float = Field(default=0.01, gt=0.0)
    penalty: float = Field(default=10.0, ge=0.0)
    m_min: float = Field(default=3.3, gt=0.0)
    m_max: float = Field(default=25.0, gt=0.0)
    decision_times: list[float] = Field(
        default_factory=lambda: [0.0, 6.0, 12.0, 18.0], min_length=1
    )
    delivery_time: float = Field(default=24.0, gt=0.0)
    flat_control_bound: float = Field(default=1.0, gt=0.0)
    flat_control_step: float = Field(default=0.01, gt=0.0)
    trend_control_bound: float = Field(default=5.0, gt=0.0)
    trend_control_step: float = Field(default=0.05, gt=0.0)
    n_train: int = Field(default=200_000, ge=1)
    n_test: int = Field(default=100_000, ge=1)
    include_penalty: bool = True

    @model_validator(mode="after")
    def validate_times(self) -> "TradingConfig":
        if not self.m_min < self.m_max:
            raise ValueError(f"Need m_min < m_max, got {self.m_min}, {self.m_max}")
        times: list[float] = self.decision_times
        if times[0] < 0.0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("Decision times must be non-negative and increasing")
        if times[-1] >= self.delivery_time:
            raise ValueError("Last decision time must precede delivery")
        return self

    @property
    def n_stages(self) -> int:
        return len(self.decision_times)

    def control_grid(self, mu_s: float) -> list[float]:
        """Position grid: narrow and fine without price trend, wide otherwise."""
        if mu_s == 0.0:
            bound, step = self.flat_control_bound, self.flat_control_step
        else:
            bound, step = self.trend_control_bound, self.trend_control_step
        n_steps: int = int(round(2.0 * bound / step))
        return [round(-bound + k * step, 10) for k in range(n_steps + 1)]


class ModelVariant(BaseModel):
    """Which forecast dynamics the trader believes in."""

    tag: VariantTag
    sigma_m: Optional[float] = None

    @model_validator(mode="after")
    def validate_sigma(self) -> "ModelVariant":
        if self.tag == VariantTag.B and not (self.sigma_m is not None and self.sigma_m > 0):
            raise ValueError("Model B needs a positive constant diffusion sigma_m")
        return self

    @property
    def state_dim(self) -> int:
        return 3 if self.tag == VariantTag.A else 2


class ProfitStats(BaseModel):
    """Monte Carlo summary of realized profits."""

    mean: float
    stderr: float = Field(..., ge=0.0)
    ci_low: float
    ci_high: float
    n: int = Field(..., ge=1)

    @classmethod
    def from_samples(cls, profits: NDArray[np.float64]) -> "ProfitStats":
        n: int = int(profits.size)
        mean: float = float(np.mean(profits))
        stderr: float = float(np.std(profits, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(
            mean=mean,
            stderr=stderr,
            ci_low=mean - 1.96 * stderr,
            ci_high=mean + 1.96 * stderr,
            n=n,
        )


class RunManifest(BaseModel):
    """Provenance written next to every command's outputs."""

    command: str
    config_path: Optional[str] = None
    seed: Optional[int] = None
    threads: int = Field(default=1, ge=1)
    inputs: list[str] = Field(default_factory=list)
    outputs: list[str] = Field(default_factory=list)
    input_hash: str = ""
    parameters: dict[str, Any] = Field(default_factory=dict)
    started_at: datetime
    finished_at: Optional[datetime] = None
