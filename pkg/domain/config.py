"""Environment settings and YAML experiment configuration."""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

import pandas as pd
import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from domain.errors import ForecastInputError
from domain.models import (
    CalibrationResult,
    ForecastState,
    HorizonCoefficients,
    MarketParams,
    MeanTransform,
    ModelFamily,
    ModelParams,
    RhoEstimator,
    RhoSchedule,
    TradingConfig,
    Variable,
)
from domain.synthetic import SyntheticTruth

ENV_PREFIX: str = "FORECAST_DYNAMICS_"

# Below this many records per horizon recovered parameters are too noisy to judge.
RECOVERY_MIN_RECORDS: int = 1000

PRESET_KEYS: set[str] = {
    "variable", "seed", "n_issue", "n_locations", "n_members", "substeps",
}


class Settings(BaseModel):
    """Process-level settings; nothing here changes results."""

    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Ensure the level is one the logging module knows."""
        level: str = v.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"Unknown log level {v!r}")
        return level

    @classmethod
    def from_env(cls, environ: Optional[Mapping[str, str]] = None) -> "Settings":
        env: Mapping[str, str] = os.environ if environ is None else environ
        values: dict[str, Any] = {}
        if f"{ENV_PREFIX}THREADS" in env:
            values["threads"] = env[f"{ENV_PREFIX}THREADS"]
        if f"{ENV_PREFIX}LOG_LEVEL" in env:
            values["log_level"] = env[f"{ENV_PREFIX}LOG_LEVEL"]
        try:
            return cls(**values)
        except ValidationError as e:
            raise ForecastInputError(f"Invalid environment settings: {e}") from e


class SigmaMRule(str, Enum):
    """How the constant diffusion of model B is derived from model A."""

    RHO_SQRT_V0 = "rho_sqrt_v0"
    V0 = "v0"


class ForecastSetup(BaseModel):
    """Wind-speed forecast dynamics of the trading experiment."""

    family: ModelFamily = ModelFamily.LOG_NIG
    b: float = Field(default=0.035, gt=0.0)
    rho: float = Field(default=0.16, gt=0.0)
    m0: float = Field(default=5.38, gt=0.0)
    v0: float = Field(default=0.032, ge=0.0)

    @field_validator("family")
    @classmethod
    def validate_family(cls, v: ModelFamily) -> ModelFamily:
        """Wind speed needs a positive family."""
        if not v.is_positive:
            raise ValueError(f"Wind forecasts need a positive family, got {v.value}")
        return v

    def model_params(self, delivery_time: float) -> ModelParams:
        return ModelParams(
            family=self.family,
            b=self.b,
            rho=RhoSchedule.constant(self.rho),
            delivery_time=delivery_time,
        )

    def initial_state(self, v0: Optional[float] = None) -> ForecastState:
        return ForecastState(t=0.0, m=self.m0, V=self.v0 if v0 is None else v0)


class ExperimentConfig(BaseModel):
    """Model A versus model B trading experiment."""

    seed: int = 0
    forecast: ForecastSetup = Field(default_factory=ForecastSetup)
    market: MarketParams = Field(default_factory=MarketParams)
    trading: TradingConfig = Field(default_factory=TradingConfig)
    cells_per_dim: int = Field(default=15, ge=1)
    substeps: int = Field(default=60, ge=1)
    mu_s_levels: list[float] = Field(default_factory=lambda: [-0.5, 0.0, 0.5])
    v0_levels: list[float] = Field(default_factory=lambda: [0.016, 0.032, 0.064])
    sweep_mu_s: float = 0.0
    sigma_m_rule: SigmaMRule = SigmaMRule.RHO_SQRT_V0

    @field_validator("v0_levels")
    @classmethod
    def validate_v0_levels(cls, v: list[float]) -> list[float]:
        """Ensure uncertainty levels are non-negative."""
        if any(level < 0.0 for level in v):
            raise ValueError("Uncertainty levels must be non-negative")
        return v

    def sigma_m(self, v0: Optional[float] = None) -> float:
        """Constant diffusion of model B for the given initial uncertainty."""
        level: float = self.forecast.v0 if v0 is None else v0
        if self.sigma_m_rule == SigmaMRule.V0:
            return level
        return self.forecast.rho * level**0.5


class RecoveryConfig(BaseModel):
    """Generating values and scale of a synthetic parameter-recovery run."""

    variable: Variable
    family: ModelFamily
    b: float = Field(..., gt=0.0)
    rho: list[float] = Field(..., min_length=1)
    coefficients: list[HorizonCoefficients] = Field(..., min_length=2)
    mean_range: tuple[float, float]
    factor_range: tuple[float, float]
    mean_transform: MeanTransform = MeanTransform.IDENTITY
    rho_estimator: Optional[RhoEstimator] = None
    n_issue: int = Field(default=38, ge=1)
    n_locations: int = Field(default=273, ge=1)
    n_members: int = Field(default=50, ge=2)
    substeps: int = Field(default=100, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def validate_rho(self) -> "RecoveryConfig":
        if len(self.rho) != len(self.coefficients) - 1:
            raise ValueError(
                f"Need {len(self.coefficients) - 1} rates for "
                f"{len(self.coefficients)} horizons, got {len(self.rho)}"
            )
        return self

    @property
    def horizons(self) -> list[int]:
        return [c.horizon_h for c in self.coefficients]

    @property
    def records_per_horizon(self) -> int:
        return self.n_issue * self.n_locations

    def truth(self) -> SyntheticTruth:
        return SyntheticTruth(
            family=self.family,
            variable=self.variable,
            b=self.b,
            rho=RhoSchedule(breakpoints=[float(h) for h in self.horizons], values=self.rho),
            coefficients=[c.model_copy(update={"b": self.b}) for c in self.coefficients],
            mean_range=self.mean_range,
            factor_range=self.factor_range,
            mean_transform=self.mean_transform,
        )

    def scaled(self, fraction: float) -> "RecoveryConfig":
        """Same truth with the number of locations scaled by `fraction`."""
        if fraction <= 0.0:
            raise ForecastInputError(f"Scale must be positive, got {fraction}")
        return self.model_copy(
            update={"n_locations": max(1, int(round(self.n_locations * fraction)))}
        )

    def recovery_errors(self, result: CalibrationResult) -> pd.DataFrame:
        """Relative error of every recovered parameter against its generating value."""
        rows: list[dict[str, Any]] = []
        for truth in self.coefficients:
            fitted: HorizonCoefficients = result.coefficients_for(truth.horizon_h)
            for name in ("a0", "a1", "c", "d"):
                rows.append(
                    {
                        "parameter": name,
                        "horizon_h": truth.horizon_h,
                        "true": getattr(truth, name),
                        "estimate": getattr(fitted, name),
                    }
                )
        rows.append(
            {"parameter": "b", "horizon_h": None, "true": self.b, "estimate": result.shared_b}
        )
        if result.rho is not None:
            stderr: dict[str, float] = result.diagnostics.rho_stderr
            for k, (true_rate, rate) in enumerate(zip(self.rho, result.rho.values)):
                label: str = f"{self.horizons[k]}-{self.horizons[k + 1]}h"
                rows.append(
                    {
                        "parameter": "rho",
                        "horizon_h": self.horizons[k + 1],
                        "true": true_rate,
                        "estimate": rate,
                        "stderr": stderr.get(label, float("nan")),
                    }
                )
        frame: pd.DataFrame = pd.DataFrame(rows)
        frame["horizon_h"] = frame["horizon_h"].astype("Int64")
        frame["rel_error"] = (frame["estimate"] - frame["true"]).abs() / frame["true"].abs()
        return frame

    @classmethod
    def preset(cls, variable: Variable) -> "RecoveryConfig":
        """Generating values of the wind-speed or temperature archive."""
        horizons: list[int] = [12, 24, 36, 48]
        if variable == Variable.TEMPERATURE:
            return cls(
                variable=variable,
                family=ModelFamily.NIG,
                b=0.719,
                rho=[0.16, 0.16, 0.16],
                coefficients=[
                    HorizonCoefficients(
                        horizon_h=h, a0=0.217, a1=0.952, c=0.312, d=1.722, b=0.719
                    )
                    for h in horizons
                ],
                mean_range=(-5.0, 15.0),
                factor_range=(3.0, 8.0),
            )
        return cls(
            variable=variable,
            family=ModelFamily.LOG_NIG,
            b=0.035,
            rho=[0.171, 0.153, 0.168],
            coefficients=[
                HorizonCoefficients(
                    horizon_h=h, a0=0.117, a1=0.964, c=0.360, d=0.765, b=0.035
                )
                for h in horizons
            ],
            mean_range=(6.0, 13.0),
            factor_range=(0.025, 0.045),
            mean_transform=(
                MeanTransform.LOG
                if variable == Variable.LOG_WIND_SPEED
                else MeanTransform.IDENTITY
            ),
        )


# Helper Functions
def load_yaml(path: Path | str) -> dict[str, Any]:
    """Read a YAML mapping."""
    source: Path = Path(path)
    if not source.exists():
        raise ForecastInputError(f"Config file not found: {source}")
    with source.open() as f:
        try:
            data: Any = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ForecastInputError(f"Invalid YAML in {source}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ForecastInputError(f"{source} must contain a mapping")
    return data


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    try:
        return ExperimentConfig(**load_yaml(path))
    except ValidationError as e:
        raise ForecastInputError(f"Invalid experiment config {path}: {e}") from e


def load_recovery_config(path: Path | str) -> RecoveryConfig:
    """Recovery config from YAML; a bare `variable` selects its preset."""
    data: dict[str, Any] = load_yaml(path)
    try:
        if set(data) <= PRESET_KEYS:
            variable = Variable(data.get("variable", Variable.WIND_SPEED.value))
            overrides: dict[str, Any] = {k: v for k, v in data.items() if k != "variable"}
            base: dict[str, Any] = RecoveryConfig.preset(variable).model_dump()
            return RecoveryConfig(**{**base, **overrides})
        return RecoveryConfig(**data)
    except (ValidationError, ValueError) as e:
        raise ForecastInputError(f"Invalid recovery config {path}: {e}") from e
