"""Forecast verification: MSE, CRPS, rank and PIT histograms, interval widths."""

import cmath
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, Field, model_validator
from scipy import stats

from domain.calibration import predictive_arrays
from domain.errors import ForecastInputError
from domain.forecast import (
    canonical_nig_params,
    factor_from_variance,
    predictive_cdf,
    predictive_quantile,
)
from domain.models import (
    CalibrationResult,
    Dataset,
    ForecastState,
    HorizonSample,
    ModelFamily,
    ModelParams,
    NigCanonical,
    RhoSchedule,
)
from domain.numerics import adaptive_quad

logger = logging.getLogger(__name__)

DEFAULT_PIT_BINS: int = 20
DEFAULT_CI_LEVEL: float = 0.9
DEFAULT_CI_SAMPLE: int = 200
DEFAULT_CRPS_TOL: float = 1e-6
PIT_TOLERANCE: float = 1e-9


class HorizonScores(BaseModel):
    """Scores of one lead time; model entries are absent in raw-only mode."""

    horizon_h: int
    n_records: int = Field(..., ge=1)
    n_scored: int = Field(..., ge=1)
    mse_raw: float = Field(..., ge=0.0)
    crps_raw: float = Field(..., ge=0.0)
    mse_model: Optional[float] = Field(default=None, ge=0.0)
    crps_model: Optional[float] = Field(default=None, ge=0.0)
    ci_width_mean: Optional[float] = Field(default=None, ge=0.0)


class Histogram(BaseModel):
    """Bin counts with a uniformity test."""

    horizon_h: int
    kind: str
    counts: list[int]
    statistic: float
    p_value: float

    @property
    def total(self) -> int:
        return int(sum(self.counts))


class ScoreReport(BaseModel):
    """Verification of raw ensembles and, if calibrated, predictive laws."""

    family: Optional[ModelFamily] = None
    log_scale: bool = False
    ci_level: float = DEFAULT_CI_LEVEL
    horizons: list[HorizonScores]
    talagrand: list[Histogram]
    pit: list[Histogram] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_counts(self) -> "ScoreReport":
        by_horizon: dict[int, HorizonScores] = {s.horizon_h: s for s in self.horizons}
        for hist in self.talagrand:
            if hist.total != by_horizon[hist.horizon_h].n_records:
                raise ValueError(f"Talagrand counts do not sum to records at {hist.horizon_h}h")
        for hist in self.pit:
            if hist.total != by_horizon[hist.horizon_h].n_scored:
                raise ValueError(f"PIT counts do not sum to scored records at {hist.horizon_h}h")
        return self

    def to_frames(self) -> dict[str, pd.DataFrame]:
        """CSV-ready tables: scores (one row per horizon and metric) and histograms."""
        score_rows: list[dict[str, object]] = []
        for s in self.horizons:
            for metric in ("mse_raw", "mse_model", "crps_raw", "crps_model", "ci_width_mean"):
                value: Optional[float] = getattr(s, metric)
                if value is not None:
                    score_rows.append({"horizon_h": s.horizon_h, "metric": metric, "value": value})
        frames: dict[str, pd.DataFrame] = {
            "scores": pd.DataFrame(score_rows, columns=["horizon_h", "metric", "value"]),
            "talagrand": _histogram_frame(self.talagrand, label="rank"),
        }
        if self.pit:
            frames["pit"] = _histogram_frame(self.pit, label="bin")
        tests: list[dict[str, object]] = [
            {
                "horizon_h": h.horizon_h,
                "kind": h.kind,
                "statistic": h.statistic,
                "p_value": h.p_value,
            }
            for h in [*self.talagrand, *self.pit]
        ]
        frames["uniformity"] = pd.DataFrame(
            tests, columns=["horizon_h", "kind", "statistic", "p_value"]
        )
        return frames


def _histogram_frame(histograms: list[Histogram], label: str) -> pd.DataFrame:
    rows: list[dict[str, int]] = [
        {"horizon_h": h.horizon_h, label: i, "count": c}
        for h in histograms
        for i, c in enumerate(h.counts)
    ]
    return pd.DataFrame(rows, columns=["horizon_h", label, "count"])


# Point and ensemble scores
def mse(predictions: ArrayLike, realizations: ArrayLike) -> float:
    """Mean squared error per record."""
    pred: NDArray[np.float64] = np.asarray(predictions, dtype=np.float64).ravel()
    obs: NDArray[np.float64] = np.asarray(realizations, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ForecastInputError("Cannot score an empty set")
    if pred.shape != obs.shape:
        raise ForecastInputError(f"Length mismatch: {pred.size} vs {obs.size}")
    return float(np.mean((pred - obs) ** 2))


def crps_ensemble(members: ArrayLike, y: ArrayLike) -> float | NDArray[np.float64]:
    """
    CRPS of the empirical ensemble distribution, exactly.

    Uses the order statistics: (2/M)·Σ_l (x_(l) − y)(1{y < x_(l)} − (l − ½)/M).
    Leading axes of `members` broadcast against `y`.
    """
    x: NDArray[np.float64] = np.sort(np.asarray(members, dtype=np.float64), axis=-1)
    obs: NDArray[np.float64] = np.asarray(y, dtype=np.float64)[..., None]
    size: int = x.shape[-1]
    if size < 1:
        raise ForecastInputError("Ensemble is empty")
    weights: NDArray[np.float64] = (np.arange(1, size + 1) - 0.5) / size
    terms: NDArray[np.float64] = (x - obs) * ((obs < x).astype(np.float64) - weights)
    score: NDArray[np.float64] = 2.0 / size * terms.sum(axis=-1)
    if score.ndim == 0:
        return float(score)
    return score


# Parametric CRPS
def _tail_envelope(canonical: NigCanonical, u: float) -> float:
    """Bound on |φ(v)| for v ≥ u."""
    return math.exp(
        canonical.delta * (canonical.gamma - math.hypot(canonical.gamma, u))
    )


def crps_parametric(canonical: NigCanonical, y: float, tol: float = DEFAULT_CRPS_TOL) -> float:
    """
    CRPS of an NIG law by the Plancherel identity.

    CRPS = (1/π)·∫₀^∞ |φ(u) − e^{iuy}|²/u² du. The integral is cut at U, the
    first doubling with (2e + e²)/(πU) ≤ tol/2 for the envelope e(U) of |φ|,
    and the remainder of the 1/u² term is added as 1/(πU).

    Raises:
        ForecastInputError: for tol ≤ 0
        ConvergenceError: if a quadrature piece fails
    """
    if tol <= 0.0:
        raise ForecastInputError(f"Tolerance must be positive, got {tol}")
    if canonical.delta == 0.0:
        return abs(canonical.mu - y)

    scale: float = math.sqrt(canonical.variance)
    first: float = 1.0 / scale
    upper: float = first
    for _ in range(200):
        e: float = _tail_envelope(canonical, upper)
        if (2.0 * e + e * e) / (math.pi * upper) <= 0.5 * tol:
            break
        upper *= 2.0
    edges: list[float] = [0.0, first]
    while edges[-1] < upper:
        edges.append(2.0 * edges[-1])

    alpha2: float = canonical.alpha**2
    shift: float = canonical.mu - y

    def integrand(u: float) -> float:
        root: complex = cmath.sqrt(alpha2 - (canonical.beta + 1j * u) ** 2)
        re: float = canonical.delta * (canonical.gamma - root.real)
        im: float = u * shift - canonical.delta * root.imag
        return (math.expm1(re) ** 2 + 4.0 * math.exp(re) * math.sin(0.5 * im) ** 2) / (u * u)

    piece_tol: float = 0.5 * math.pi * tol / (len(edges) - 1)
    total: float = sum(
        adaptive_quad(f=integrand, a=a, b=b, tol=piece_tol).value
        for a, b in zip(edges[:-1], edges[1:])
    )
    return max((total + 1.0 / edges[-1]) / math.pi, 0.0)


# Histograms and intervals
def rank_histogram(
    members: ArrayLike, realizations: ArrayLike, seed: int = 0
) -> list[int]:
    """
    Counts of the realization's rank within its ensemble, M + 1 bins.

    Ties with members are broken uniformly at random (seeded).
    """
    x: NDArray[np.float64] = np.atleast_2d(np.asarray(members, dtype=np.float64))
    obs: NDArray[np.float64] = np.atleast_1d(np.asarray(realizations, dtype=np.float64))
    if x.shape[0] != obs.size:
        raise ForecastInputError(f"{x.shape[0]} ensembles but {obs.size} realizations")
    below: NDArray[np.int64] = np.sum(x < obs[:, None], axis=1)
    ties: NDArray[np.int64] = np.sum(x == obs[:, None], axis=1)
    rng: np.random.Generator = np.random.default_rng(seed)
    ranks: NDArray[np.int64] = below + rng.integers(0, ties + 1)
    return np.bincount(ranks, minlength=x.shape[1] + 1).tolist()


def talagrand_chi2(counts: Sequence[int]) -> tuple[float, float]:
    """Chi-square statistic and p-value of uniformity of a rank histogram."""
    result = stats.chisquare(np.asarray(counts, dtype=np.float64))
    return float(result.statistic), float(result.pvalue)


def pit_histogram(
    values: ArrayLike, bins: int = DEFAULT_PIT_BINS
) -> tuple[list[int], float, float]:
    """
    Histogram of PIT values on [0, 1] with a Kolmogorov-Smirnov test.

    Returns:
        (counts, KS statistic, p-value)

    Raises:
        ForecastInputError: for values outside [0, 1] beyond rounding
    """
    pit: NDArray[np.float64] = np.asarray(values, dtype=np.float64).ravel()
    if pit.size == 0:
        raise ForecastInputError("No PIT values")
    if bins < 1:
        raise ForecastInputError(f"Need at least one bin, got {bins}")
    if np.any(pit < -PIT_TOLERANCE) or np.any(pit > 1.0 + PIT_TOLERANCE):
        raise ForecastInputError("PIT values must lie in [0, 1]")
    pit = np.clip(pit, 0.0, 1.0)
    counts, _ = np.histogram(pit, bins=bins, range=(0.0, 1.0))
    test = stats.kstest(pit, "uniform")
    return counts.tolist(), float(test.statistic), float(test.pvalue)


def ci_interval(
    params: ModelParams, state: ForecastState, level: float = DEFAULT_CI_LEVEL, tol: float = 1e-7
) -> tuple[float, float]:
    """Central interval (q_{(1−level)/2}, q_{(1+level)/2}) of m_T."""
    if not 0.0 < level < 1.0:
        raise ForecastInputError(f"Level must lie in (0, 1), got {level}")
    return (
        predictive_quantile(params=params, state=state, p=0.5 * (1.0 - level), tol=tol),
        predictive_quantile(params=params, state=state, p=0.5 * (1.0 + level), tol=tol),
    )


def ci_width(
    params: ModelParams, state: ForecastState, level: float = DEFAULT_CI_LEVEL, tol: float = 1e-7
) -> float:
    """Width of the central interval; 0 for the point mass V = 0."""
    lower, upper = ci_interval(params=params, state=state, level=level, tol=tol)
    return upper - lower


# Report
def _subset(size: int, limit: Optional[int], rng: np.random.Generator) -> NDArray[np.intp]:
    if limit is None or limit >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def _ordered_map(fn, items: list, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(fn, items))
    return [fn(item) for item in items]


def score_horizon(
    sample: HorizonSample,
    calibration: Optional[CalibrationResult],
    log_scale: bool,
    pit_bins: int = DEFAULT_PIT_BINS,
    ci_level: float = DEFAULT_CI_LEVEL,
    sample_size: Optional[int] = None,
    ci_sample: Optional[int] = DEFAULT_CI_SAMPLE,
    seed: int = 0,
    threads: int = 1,
) -> tuple[HorizonScores, Histogram, Optional[Histogram]]:
    """Scores and histograms of one horizon."""
    rng: np.random.Generator = np.random.default_rng(seed + sample.horizon_h)
    members: NDArray[np.float64] = sample.members
    observed: NDArray[np.float64] = sample.realizations
    if log_scale:
        if np.any(members <= 0.0) or np.any(observed <= 0.0):
            raise ForecastInputError(
                f"Log-scale scores need positive values at horizon {sample.horizon_h}h"
            )
        scored_members: NDArray[np.float64] = np.log(members)
        scored_obs: NDArray[np.float64] = np.log(observed)
    else:
        scored_members, scored_obs = members, observed

    ranks: list[int] = rank_histogram(
        members=members, realizations=observed, seed=int(rng.integers(2**31))
    )
    chi2, chi2_p = talagrand_chi2(ranks)
    talagrand = Histogram(
        horizon_h=sample.horizon_h, kind="talagrand", counts=ranks, statistic=chi2, p_value=chi2_p
    )

    chosen: NDArray[np.intp] = _subset(sample.size, sample_size, rng)
    crps_raw: NDArray[np.float64] = crps_ensemble(scored_members[chosen], scored_obs[chosen])
    scores: dict[str, object] = {
        "horizon_h": sample.horizon_h,
        "n_records": sample.size,
        "n_scored": int(chosen.size),
        "mse_raw": mse(scored_members.mean(axis=1), scored_obs),
        "crps_raw": float(np.mean(crps_raw)),
    }
    if calibration is None:
        return HorizonScores(**scores), talagrand, None

    family: ModelFamily = calibration.family
    b: float = calibration.shared_b
    coeffs = calibration.coefficients_for(sample.horizon_h)
    m, sigma2 = predictive_arrays(
        sample=sample, coeffs=coeffs, family=family, transform=calibration.mean_transform
    )
    factor: NDArray[np.float64] = np.maximum(
        factor_from_variance(family=family, m=m, sigma2=sigma2), 0.0
    )
    canonicals: list[NigCanonical] = [
        canonical_nig_params(family=family, m=float(mi), b=b, V=float(vi))
        for mi, vi in zip(m, factor)
    ]
    if log_scale:
        scores["mse_model"] = mse([c.mean for c in canonicals], scored_obs)
    else:
        scores["mse_model"] = mse(m, scored_obs)

    # The law of m_T at a fixed state does not depend on the rate schedule.
    params = ModelParams(
        family=family, b=b, rho=RhoSchedule.constant(1.0), delivery_time=float(sample.horizon_h)
    )
    states: list[ForecastState] = [
        ForecastState(m=float(mi), V=float(vi)) for mi, vi in zip(m, factor)
    ]

    crps_model: list[float] = _ordered_map(
        lambda i: crps_parametric(canonical=canonicals[i], y=float(scored_obs[i])),
        chosen.tolist(),
        threads,
    )
    scores["crps_model"] = float(np.mean(crps_model))
    pit_values: list[float] = _ordered_map(
        lambda i: predictive_cdf(params=params, state=states[i], x=float(observed[i]), tol=1e-7),
        chosen.tolist(),
        threads,
    )
    counts, ks_stat, ks_p = pit_histogram(values=pit_values, bins=pit_bins)
    pit = Histogram(
        horizon_h=sample.horizon_h, kind="pit", counts=counts, statistic=ks_stat, p_value=ks_p
    )

    ci_chosen: NDArray[np.intp] = _subset(sample.size, ci_sample, rng)
    widths: list[float] = _ordered_map(
        lambda i: ci_width(params=params, state=states[i], level=ci_level),
        ci_chosen.tolist(),
        threads,
    )
    scores["ci_width_mean"] = float(np.mean(widths))
    logger.info(
        "horizon %dh: crps raw=%.4f model=%.4f", sample.horizon_h,
        scores["crps_raw"], scores["crps_model"],
    )
    return HorizonScores(**scores), talagrand, pit


def build_score_report(
    dataset: Dataset,
    calibration: Optional[CalibrationResult] = None,
    horizons: Optional[Sequence[int]] = None,
    pit_bins: int = DEFAULT_PIT_BINS,
    ci_level: float = DEFAULT_CI_LEVEL,
    sample_size: Optional[int] = None,
    ci_sample: Optional[int] = DEFAULT_CI_SAMPLE,
    seed: int = 0,
    threads: int = 1,
) -> ScoreReport:
    """
    Score a dataset, optionally against a calibration.

    Without a calibration only raw-ensemble scores and Talagrand histograms
    are produced. Positive families (LogNig) are scored on the log scale,
    except interval widths which stay on the native scale.

    Args:
        dataset: Joined forecasts and realizations
        calibration: Calibrated coefficients, or None for raw-only mode
        horizons: Horizons to score (default: all present)
        pit_bins: Number of PIT bins
        ci_level: Level of the central predictive interval
        sample_size: Records per horizon for CRPS and PIT (None: all)
        ci_sample: Records per horizon for interval widths (None: all)
        seed: Seed for rank tie-breaking and record subsets
        threads: Workers over records (results do not depend on it)
    """
    if not dataset.records:
        raise ForecastInputError("No records to score")
    family: ModelFamily = (
        calibration.family if calibration is not None else dataset.variable.default_family
    )
    log_scale: bool = family.is_positive
    chosen: list[int] = sorted(horizons) if horizons is not None else dataset.horizons

    results = [
        score_horizon(
            sample=dataset.horizon_sample(h),
            calibration=calibration,
            log_scale=log_scale,
            pit_bins=pit_bins,
            ci_level=ci_level,
            sample_size=sample_size,
            ci_sample=ci_sample,
            seed=seed,
            threads=threads,
        )
        for h in chosen
    ]
    return ScoreReport(
        family=calibration.family if calibration is not None else None,
        log_scale=log_scale,
        ci_level=ci_level,
        horizons=[r[0] for r in results],
        talagrand=[r[1] for r in results],
        pit=[r[2] for r in results if r[2] is not None],
    )
