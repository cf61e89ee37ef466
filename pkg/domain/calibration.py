"""EMOS-style calibration of the forecast dynamics from joined ensembles.

Step 1 fits, per horizon, the mean map by least squares and (c, d, b) by
maximum likelihood; step 2 pools all horizons to fit one shape b; step 3
estimates the piecewise-constant rate ρ from how forecasts for the same
valid time evolve across consecutive horizons.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from domain.errors import ForecastInputError
from domain.forecast import (
    factor_from_variance,
    log_predictive_density,
)
from domain.models import (
    CalibrationDiagnostics,
    CalibrationResult,
    Dataset,
    HorizonCoefficients,
    HorizonSample,
    MeanTransform,
    ModelFamily,
    RhoEstimator,
    RhoSchedule,
    Variable,
)
from domain.numerics import OptimizerConfig, minimize, ols_fit

logger = logging.getLogger(__name__)

FIT_FAMILIES: tuple[ModelFamily, ...] = (ModelFamily.NIG, ModelFamily.LOG_NIG)

# Log-parameters are clipped here before exponentiation.
LOG_PARAM_LOW: float = -30.0
LOG_PARAM_HIGH: float = 10.0

RHO_SQUARED_FLOOR: float = 1e-6

# Alternations of the mean fit and the (c, d, b) fit on the log scale.
LOG_OFFSET_ROUNDS: int = 2

INITIAL_SHAPE: dict[ModelFamily, float] = {
    ModelFamily.NIG: 0.7,
    ModelFamily.LOG_NIG: 0.1,
}

DEFAULT_ESTIMATOR: dict[ModelFamily, RhoEstimator] = {
    ModelFamily.NIG: RhoEstimator.VARIANCE_RATIO,
    ModelFamily.LOG_NIG: RhoEstimator.LOG_MEAN_RATIO,
}


class VarianceShapeFit(BaseModel):
    """Step-1 maximum-likelihood estimates for one horizon."""

    c: float = Field(..., ge=0.0)
    d: float = Field(..., ge=0.0)
    b: float = Field(..., gt=0.0)
    loglik: float
    evaluations: int = 0


class SharedShapeFit(BaseModel):
    """Step-2 pooled shape."""

    b: float = Field(..., gt=0.0)
    pooled_loglik: float


class RhoEstimate(BaseModel):
    """Step-3 schedule plus pairing bookkeeping."""

    model_config = ConfigDict(frozen=True)

    schedule: RhoSchedule
    pairs: dict[str, int] = Field(default_factory=dict)
    stderr: dict[str, float] = Field(default_factory=dict)
    unpaired: int = 0
    warnings: list[str] = Field(default_factory=list)


# EMOS maps
def ensemble_stats(
    members: ArrayLike,
) -> tuple[float | NDArray[np.float64], float | NDArray[np.float64]]:
    """
    Ensemble mean and spread (population variance) along the last axis.

    Raises:
        ForecastInputError: for fewer than two members
    """
    arr: NDArray[np.float64] = np.asarray(members, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 2:
        raise ForecastInputError("Ensemble statistics need at least two members")
    mean: NDArray[np.float64] = arr.mean(axis=-1)
    spread: NDArray[np.float64] = arr.var(axis=-1)
    if arr.ndim == 1:
        return float(mean), float(spread)
    return mean, spread


def mean_predictor(members: NDArray[np.float64], transform: MeanTransform) -> NDArray[np.float64]:
    """Regressor of the mean map: ensemble mean, or mean of log members."""
    if transform == MeanTransform.LOG:
        if np.any(members <= 0.0):
            raise ForecastInputError("Log mean transform needs positive members")
        return np.log(members).mean(axis=-1)
    return members.mean(axis=-1)


def regression_target(
    realizations: NDArray[np.float64], transform: MeanTransform
) -> NDArray[np.float64]:
    if transform == MeanTransform.LOG:
        if np.any(realizations <= 0.0):
            raise ForecastInputError("Log mean transform needs positive realizations")
        return np.log(realizations)
    return realizations


def emos_predictive(
    coeffs: HorizonCoefficients,
    mean: ArrayLike,
    spread: ArrayLike,
    family: Optional[ModelFamily] = None,
    transform: MeanTransform = MeanTransform.IDENTITY,
) -> tuple[float | NDArray[np.float64], float | NDArray[np.float64]]:
    """
    Predictive mean and variance m = a0 + a1·x̄, σ² = c + d·spread.

    With the log transform the mean map acts on the mean of log members and
    m = exp(a0 + a1·x̄).

    Raises:
        ForecastInputError: if a positive family receives m ≤ 0
    """
    x: NDArray[np.float64] = np.asarray(mean, dtype=np.float64)
    s: NDArray[np.float64] = np.asarray(spread, dtype=np.float64)
    linear: NDArray[np.float64] = coeffs.a0 + coeffs.a1 * x
    m: NDArray[np.float64] = np.exp(linear) if transform == MeanTransform.LOG else linear
    sigma2: NDArray[np.float64] = coeffs.c + coeffs.d * s
    if family is not None and family.is_positive and np.any(m <= 0.0):
        raise ForecastInputError(
            f"Predictive mean not positive for {family.value} at horizon {coeffs.horizon_h}h"
        )
    if np.ndim(m) == 0 and np.ndim(sigma2) == 0:
        return float(m), float(sigma2)
    return m, sigma2


def predictive_arrays(
    sample: HorizonSample,
    coeffs: HorizonCoefficients,
    family: ModelFamily,
    transform: MeanTransform,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-record (m, σ²) of one horizon."""
    m, sigma2 = emos_predictive(
        coeffs=coeffs,
        mean=mean_predictor(members=sample.members, transform=transform),
        spread=sample.members.var(axis=-1),
        family=family,
        transform=transform,
    )
    return np.atleast_1d(m), np.atleast_1d(sigma2)


def log_mean_offset(
    m: NDArray[np.float64], sigma2: NDArray[np.float64], b: float
) -> NDArray[np.float64]:
    """log m − E[log x̃] = V/(2 + b²) for LogNig forecasts."""
    factor: NDArray[np.float64] = factor_from_variance(
        family=ModelFamily.LOG_NIG, m=m, sigma2=sigma2
    )
    return factor / (2.0 + b * b)


# Per-horizon fits
def fit_mean_coeffs(
    sample: HorizonSample,
    transform: MeanTransform = MeanTransform.IDENTITY,
    offset: Optional[NDArray[np.float64]] = None,
) -> tuple[float, float]:
    """
    Least-squares (a0, a1) of the realization on the ensemble mean.

    A per-record `offset` is added to the target before the fit.
    """
    if sample.size < 2:
        raise ForecastInputError(f"Horizon {sample.horizon_h}h has fewer than two records")
    target: NDArray[np.float64] = regression_target(
        realizations=sample.realizations, transform=transform
    )
    if offset is not None:
        if np.shape(offset) != target.shape:
            raise ForecastInputError(
                f"Offset of shape {np.shape(offset)} for {target.size} records"
            )
        target = target + offset
    return ols_fit(xs=mean_predictor(members=sample.members, transform=transform), ys=target)


def _check_family(family: ModelFamily) -> None:
    if family not in FIT_FAMILIES:
        raise ForecastInputError(
            f"Calibration supports {[f.value for f in FIT_FAMILIES]}, got {family.value}"
        )


def horizon_loglik(
    family: ModelFamily,
    m: NDArray[np.float64],
    spread: NDArray[np.float64],
    realizations: NDArray[np.float64],
    c: float,
    d: float,
    b: float,
) -> float:
    """Σ log p(x̃ | m, σ² = c + d·spread, b) over the records of one horizon."""
    sigma2: NDArray[np.float64] = c + d * spread
    factor: NDArray[np.float64] = factor_from_variance(family=family, m=m, sigma2=sigma2)
    if np.any(factor <= 0.0):
        return -math.inf
    with np.errstate(all="ignore"):
        logp: NDArray[np.float64] = log_predictive_density(
            family=family, b=b, m=m, V=factor, x=realizations
        )
    return float(np.sum(logp))


def _unpack(theta: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.exp(np.clip(theta, LOG_PARAM_LOW, LOG_PARAM_HIGH))


def fit_variance_shape(
    sample: HorizonSample,
    a0: float,
    a1: float,
    family: ModelFamily,
    transform: MeanTransform = MeanTransform.IDENTITY,
    optimizer: OptimizerConfig = OptimizerConfig(),
    initial_b: Optional[float] = None,
) -> VarianceShapeFit:
    """
    Maximum-likelihood (c, d, b) for one horizon with the mean map frozen.

    Positivity is enforced by optimizing log-parameters. (c, d) start from
    a regression of squared residuals on the spread.
    """
    _check_family(family)
    frozen = HorizonCoefficients(horizon_h=sample.horizon_h, a0=a0, a1=a1, c=0.0, d=0.0, b=1.0)
    m, _ = predictive_arrays(sample=sample, coeffs=frozen, family=family, transform=transform)
    spread: NDArray[np.float64] = sample.members.var(axis=-1)
    realized: NDArray[np.float64] = sample.realizations
    if family.is_positive and np.any(realized <= 0.0):
        raise ForecastInputError(f"{family.value} needs positive realizations")

    squared: NDArray[np.float64] = (realized - m) ** 2
    floor: float = 1e-3 * max(float(np.mean(squared)), 1e-12)
    try:
        c0, d0 = ols_fit(xs=spread, ys=squared)
    except ForecastInputError:
        c0, d0 = float(np.mean(squared)), floor
    b0: float = initial_b if initial_b is not None else INITIAL_SHAPE[family]
    theta0: NDArray[np.float64] = np.log([max(c0, floor), max(d0, floor), b0])

    def objective(theta: NDArray[np.float64]) -> float:
        c, d, b = _unpack(theta)
        return -horizon_loglik(
            family=family, m=m, spread=spread, realizations=realized, c=c, d=d, b=b
        )

    outcome = minimize(objective=objective, x0=theta0, config=optimizer)
    c, d, b = _unpack(np.asarray(outcome.argmin))
    logger.info(
        "horizon %dh: c=%.4g d=%.4g b=%.4g loglik=%.6g",
        sample.horizon_h, c, d, b, -outcome.value,
    )
    return VarianceShapeFit(
        c=float(c), d=float(d), b=float(b), loglik=-outcome.value,
        evaluations=outcome.n_evaluations,
    )


# Shared shape
def pooled_loglik(
    samples: dict[int, HorizonSample],
    per_horizon: Sequence[HorizonCoefficients],
    family: ModelFamily,
    b: float,
    transform: MeanTransform = MeanTransform.IDENTITY,
) -> float:
    """Log-likelihood of all horizons with a common shape b."""
    total: float = 0.0
    for coeffs in per_horizon:
        sample: HorizonSample = samples[coeffs.horizon_h]
        m, _ = predictive_arrays(sample=sample, coeffs=coeffs, family=family, transform=transform)
        total += horizon_loglik(
            family=family,
            m=m,
            spread=sample.members.var(axis=-1),
            realizations=sample.realizations,
            c=coeffs.c,
            d=coeffs.d,
            b=b,
        )
    return total


def fit_shared_shape(
    samples: dict[int, HorizonSample],
    per_horizon: Sequence[HorizonCoefficients],
    family: ModelFamily,
    transform: MeanTransform = MeanTransform.IDENTITY,
    optimizer: OptimizerConfig = OptimizerConfig(),
) -> SharedShapeFit:
    """
    One-dimensional MLE of b over all horizons, other coefficients frozen.

    The search starts from the best per-horizon b on the pooled data, so the
    result never scores below any of them.
    """
    _check_family(family)
    if not per_horizon:
        raise ForecastInputError("Shared shape needs at least one calibrated horizon")

    def pooled(b: float) -> float:
        return pooled_loglik(
            samples=samples, per_horizon=per_horizon, family=family, b=b, transform=transform
        )

    start: float = max((c.b for c in per_horizon), key=pooled)

    def objective(theta: NDArray[np.float64]) -> float:
        return -pooled(float(_unpack(theta)[0]))

    outcome = minimize(objective=objective, x0=[math.log(start)], config=optimizer)
    b: float = float(_unpack(np.asarray(outcome.argmin))[0])
    logger.info("shared shape b=%.5g pooled loglik=%.6g", b, -outcome.value)
    return SharedShapeFit(b=b, pooled_loglik=-outcome.value)


# Rate schedule
def _pair_indices(
    later: HorizonSample, earlier: HorizonSample
) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    """Indices of records forecasting the same (valid_time, location)."""
    position: dict[tuple, int] = {key: i for i, key in enumerate(earlier.pair_keys)}
    later_idx: list[int] = []
    earlier_idx: list[int] = []
    for i, key in enumerate(later.pair_keys):
        j: Optional[int] = position.get(key)
        if j is not None:
            later_idx.append(i)
            earlier_idx.append(j)
    return np.asarray(later_idx, dtype=np.intp), np.asarray(earlier_idx, dtype=np.intp)


def estimate_rho(
    samples: dict[int, HorizonSample],
    per_horizon: Sequence[HorizonCoefficients],
    family: ModelFamily,
    shared_b: float,
    estimator: Optional[RhoEstimator] = None,
    transform: MeanTransform = MeanTransform.IDENTITY,
) -> RhoEstimate:
    """
    Rate per adjacent horizon pair from forecasts of the same valid time.

    For the pair (h_i, h_{i+1}) the later-issued forecast is the one with the
    shorter horizon h_i. Variance ratio: ρ² = −log(mean σ²_later/σ²_earlier)/Δh.
    Factor ratio divides additionally by the mean-reversion 1 + b²/2 of the
    LogNig factor. Log-mean ratio: ρ²Δh = −(2/(2+b²))·log(1 + (2+b²)·mean of
    log(m_later/m_earlier)/V_earlier). Each rate comes with a delta-method
    standard error from the spread of the per-pair terms.

    Raises:
        ForecastInputError: with fewer than two horizons, an interval without
            pairs, or a non-positive log argument (the interval is named)
    """
    _check_family(family)
    chosen: RhoEstimator = estimator or DEFAULT_ESTIMATOR[family]
    if chosen == RhoEstimator.LOG_MEAN_RATIO and not family.is_positive:
        raise ForecastInputError("The log-mean estimator needs a positive family")
    coeffs_by_h: dict[int, HorizonCoefficients] = {c.horizon_h: c for c in per_horizon}
    horizons: list[int] = sorted(coeffs_by_h)
    if len(horizons) < 2:
        raise ForecastInputError("Rate estimation needs at least two horizons")

    predictive: dict[int, tuple[NDArray[np.float64], NDArray[np.float64]]] = {
        h: predictive_arrays(
            sample=samples[h], coeffs=coeffs_by_h[h], family=family, transform=transform
        )
        for h in horizons
    }

    values: list[float] = []
    pairs: dict[str, int] = {}
    stderr: dict[str, float] = {}
    warnings: list[str] = []
    unpaired: int = 0
    b2: float = shared_b * shared_b
    for short, long in zip(horizons[:-1], horizons[1:]):
        label: str = f"{short}-{long}h"
        later_idx, earlier_idx = _pair_indices(later=samples[short], earlier=samples[long])
        unpaired += samples[short].size + samples[long].size - 2 * later_idx.size
        if later_idx.size == 0:
            raise ForecastInputError(f"No paired forecasts for interval {label}")
        pairs[label] = int(later_idx.size)

        m_later: NDArray[np.float64] = predictive[short][0][later_idx]
        s2_later: NDArray[np.float64] = predictive[short][1][later_idx]
        m_earlier: NDArray[np.float64] = predictive[long][0][earlier_idx]
        s2_earlier: NDArray[np.float64] = predictive[long][1][earlier_idx]
        if np.any(s2_later <= 0.0) or np.any(s2_earlier <= 0.0):
            raise ForecastInputError(f"Non-positive predictive variance in interval {label}")
        span: float = float(long - short)

        if chosen == RhoEstimator.LOG_MEAN_RATIO:
            v_earlier = factor_from_variance(family=family, m=m_earlier, sigma2=s2_earlier)
            terms: NDArray[np.float64] = np.log(m_later / m_earlier) / v_earlier
            weight: float = 2.0 + b2
            argument: float = 1.0 + weight * float(np.mean(terms))
            scale: float = 2.0 / (2.0 + b2)
        else:
            if chosen == RhoEstimator.FACTOR_RATIO:
                terms = factor_from_variance(family, m_later, s2_later) / factor_from_variance(
                    family, m_earlier, s2_earlier
                )
                scale = 1.0 / (1.0 + 0.5 * b2) if family.is_positive else 1.0
            else:
                terms = s2_later / s2_earlier
                scale = 1.0
            weight = 1.0
            argument = float(np.mean(terms))
        argument_se: float = (
            weight * float(np.std(terms, ddof=1)) / math.sqrt(terms.size)
            if terms.size > 1
            else 0.0
        )

        if not argument > 0.0:
            raise ForecastInputError(
                f"Log argument {argument:.4g} ≤ 0 in rate estimation for interval {label}"
            )
        rho2: float = -scale * math.log(argument) / span
        if rho2 < RHO_SQUARED_FLOOR:
            message: str = (
                f"interval {label}: rho² estimate {rho2:.3g} "
                f"clamped to {RHO_SQUARED_FLOOR}"
            )
            logger.warning(message)
            warnings.append(message)
            rho2 = RHO_SQUARED_FLOOR
        rate: float = math.sqrt(rho2)
        values.append(rate)
        # Delta method through ρ = √(−scale·log(argument)/span).
        stderr[label] = scale * argument_se / (argument * span * 2.0 * rate)

    if unpaired:
        logger.warning("%d forecasts had no partner at the adjacent horizon", unpaired)
    return RhoEstimate(
        schedule=RhoSchedule(breakpoints=[float(h) for h in horizons], values=values),
        pairs=pairs,
        stderr=stderr,
        unpaired=unpaired,
        warnings=warnings,
    )


# Pipeline
def _positive_records(sample: HorizonSample, transform: MeanTransform) -> HorizonSample:
    keep: NDArray[np.bool_] = sample.realizations > 0.0
    if transform == MeanTransform.LOG:
        keep &= np.all(sample.members > 0.0, axis=1)
    if np.all(keep):
        return sample
    logger.warning(
        "horizon %dh: dropping %d records with non-positive values",
        sample.horizon_h, int(np.sum(~keep)),
    )
    return HorizonSample(
        horizon_h=sample.horizon_h,
        members=sample.members[keep],
        realizations=sample.realizations[keep],
        valid_times=[t for t, k in zip(sample.valid_times, keep) if k],
        locations=[loc for loc, k in zip(sample.locations, keep) if k],
    )


def calibrate(
    dataset: Dataset,
    family: Optional[ModelFamily] = None,
    mean_transform: Optional[MeanTransform] = None,
    estimator: Optional[RhoEstimator] = None,
    horizons: Optional[Sequence[int]] = None,
    optimizer: OptimizerConfig = OptimizerConfig(),
    threads: int = 1,
) -> CalibrationResult:
    """
    Run the three calibration steps end to end.

    Args:
        dataset: Joined forecasts and realizations
        family: Nig or LogNig; defaults from the dataset variable
        mean_transform: Mean-map scale; log for the log-wind-speed variable
        estimator: Rate estimator; defaults per family
        horizons: Horizons that must be present (default: all in the data)
        optimizer: Multi-start simplex settings
        threads: Horizons fitted concurrently in step 1

    Returns:
        CalibrationResult with per-horizon coefficients, shared b and ρ
    """
    chosen_family: ModelFamily = family or dataset.variable.default_family
    _check_family(chosen_family)
    transform: MeanTransform = mean_transform or (
        MeanTransform.LOG if dataset.variable == Variable.LOG_WIND_SPEED else MeanTransform.IDENTITY
    )
    chosen_estimator: RhoEstimator = estimator or DEFAULT_ESTIMATOR[chosen_family]

    available: list[int] = dataset.horizons
    wanted: list[int] = sorted(horizons) if horizons is not None else available
    missing: list[int] = [h for h in wanted if h not in available]
    if missing:
        raise ForecastInputError(f"Missing horizon(s) in data: {missing}")

    samples: dict[int, HorizonSample] = {}
    for h in wanted:
        sample: HorizonSample = dataset.horizon_sample(h)
        if chosen_family.is_positive or transform == MeanTransform.LOG:
            sample = _positive_records(sample=sample, transform=transform)
        samples[h] = sample

    refine: bool = transform == MeanTransform.LOG and chosen_family == ModelFamily.LOG_NIG

    def fit_horizon(h: int) -> tuple[HorizonCoefficients, VarianceShapeFit]:
        a0, a1 = fit_mean_coeffs(sample=samples[h], transform=transform)
        fit: VarianceShapeFit = fit_variance_shape(
            sample=samples[h], a0=a0, a1=a1, family=chosen_family,
            transform=transform, optimizer=optimizer,
        )
        coeffs = HorizonCoefficients(horizon_h=h, a0=a0, a1=a1, c=fit.c, d=fit.d, b=fit.b)
        # Log realizations sit V/(2 + b²) below log m; refit the mean map with
        # that offset from the current variance fit.
        for _ in range(LOG_OFFSET_ROUNDS if refine else 0):
            m, sigma2 = predictive_arrays(
                sample=samples[h], coeffs=coeffs, family=chosen_family, transform=transform
            )
            a0, a1 = fit_mean_coeffs(
                sample=samples[h], transform=transform,
                offset=log_mean_offset(m=m, sigma2=sigma2, b=fit.b),
            )
            fit = fit_variance_shape(
                sample=samples[h], a0=a0, a1=a1, family=chosen_family,
                transform=transform, optimizer=optimizer, initial_b=fit.b,
            )
            coeffs = HorizonCoefficients(horizon_h=h, a0=a0, a1=a1, c=fit.c, d=fit.d, b=fit.b)
        return coeffs, fit

    if threads > 1 and len(wanted) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            fitted = list(executor.map(fit_horizon, wanted))
    else:
        fitted = [fit_horizon(h) for h in wanted]
    per_horizon: list[HorizonCoefficients] = [coeffs for coeffs, _ in fitted]

    shared: SharedShapeFit = fit_shared_shape(
        samples=samples, per_horizon=per_horizon, family=chosen_family,
        transform=transform, optimizer=optimizer,
    )

    diagnostics = CalibrationDiagnostics(
        loglik={c.horizon_h: fit.loglik for c, fit in fitted},
        pooled_loglik=shared.pooled_loglik,
        evaluations={c.horizon_h: fit.evaluations for c, fit in fitted},
        n_records={h: samples[h].size for h in wanted},
    )
    rho: Optional[RhoSchedule] = None
    if len(wanted) >= 2:
        estimate: RhoEstimate = estimate_rho(
            samples=samples, per_horizon=per_horizon, family=chosen_family,
            shared_b=shared.b, estimator=chosen_estimator, transform=transform,
        )
        rho = estimate.schedule
        diagnostics.rho_pairs = estimate.pairs
        diagnostics.rho_stderr = estimate.stderr
        diagnostics.unpaired = estimate.unpaired
        diagnostics.warnings.extend(estimate.warnings)
    else:
        logger.warning("single horizon: no rate schedule estimated")

    return CalibrationResult(
        family=chosen_family,
        variable=dataset.variable,
        mean_transform=transform,
        rho_estimator=chosen_estimator,
        per_horizon=per_horizon,
        shared_b=shared.b,
        rho=rho,
        diagnostics=diagnostics,
    )
