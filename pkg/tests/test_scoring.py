"""Unit tests for verification scores and the score report."""

import math

import numpy as np
import properscoring as ps
import pytest
from scipy import integrate, stats

from domain.config import RecoveryConfig
from domain.errors import ForecastInputError
from domain.models import (
    CalibrationResult,
    ForecastState,
    ModelFamily,
    ModelParams,
    NigCanonical,
    RhoEstimator,
    RhoSchedule,
    Variable,
)
from domain.scoring import (
    build_score_report,
    ci_width,
    crps_ensemble,
    crps_parametric,
    mse,
    pit_histogram,
    rank_histogram,
    talagrand_chi2,
)
from domain.synthetic import generate_dataset


def _quadrature_crps(canonical: NigCanonical, y: float) -> float:
    """∫ (F(x) − 1{x ≥ y})² dx with scipy's NIG law."""
    law = stats.norminvgauss(
        a=canonical.alpha * canonical.delta,
        b=canonical.beta * canonical.delta,
        loc=canonical.mu,
        scale=canonical.delta,
    )
    below, _ = integrate.quad(lambda x: law.cdf(x) ** 2, -np.inf, y, epsabs=1e-10)
    above, _ = integrate.quad(lambda x: law.sf(x) ** 2, y, np.inf, epsabs=1e-10)
    return below + above


def _truth_calibration(variable: Variable) -> CalibrationResult:
    config = RecoveryConfig.preset(variable)
    return CalibrationResult(
        family=config.family,
        variable=variable,
        mean_transform=config.mean_transform,
        rho_estimator=RhoEstimator.VARIANCE_RATIO,
        per_horizon=config.coefficients,
        shared_b=config.b,
        rho=RhoSchedule(breakpoints=[float(h) for h in config.horizons], values=config.rho),
    )


def test_crps_ensemble_matches_properscoring() -> None:
    """Order-statistic formula equals the energy form on random ensembles."""
    rng = np.random.default_rng(12)
    for _ in range(100):
        size: int = int(rng.integers(1, 12))
        members = rng.normal(size=size)
        y: float = float(rng.normal())
        assert crps_ensemble(members, y) == pytest.approx(
            float(ps.crps_ensemble(y, members)), abs=1e-10
        )

    batch = rng.normal(size=(7, 5))
    obs = rng.normal(size=7)
    np.testing.assert_allclose(crps_ensemble(batch, obs), ps.crps_ensemble(obs, batch), atol=1e-10)

    print("✓ Ensemble CRPS matches properscoring")


def test_crps_parametric_matches_quadrature() -> None:
    """Plancherel CRPS agrees with CDF quadrature for symmetric and skewed laws."""
    rng = np.random.default_rng(5)
    for _ in range(6):
        alpha: float = float(rng.uniform(1.0, 3.0))
        beta: float = float(rng.uniform(-0.5, 0.5))
        canonical = NigCanonical.from_alpha_beta(
            alpha=alpha, beta=beta, delta=float(rng.uniform(0.5, 2.0)), mu=float(rng.normal())
        )
        y: float = float(rng.normal(scale=2.0))
        assert crps_parametric(canonical, y) == pytest.approx(
            _quadrature_crps(canonical, y), abs=1e-4
        )

    print("✓ Parametric CRPS matches quadrature")


def test_crps_parametric_limits() -> None:
    """Near-Gaussian shape gives the Gaussian CRPS; δ = 0 gives |μ − y|."""
    b, V = 0.01, 1.0
    near_normal = NigCanonical(alpha=1.0 / b, beta=0.0, gamma=1.0 / b, delta=V / b, mu=0.0)
    assert crps_parametric(near_normal, 0.7) == pytest.approx(
        float(ps.crps_gaussian(0.7, mu=0.0, sig=1.0)), abs=1e-3
    )

    point = NigCanonical(alpha=2.0, beta=0.0, gamma=2.0, delta=0.0, mu=1.5)
    assert crps_parametric(point, 0.25) == pytest.approx(1.25)

    with pytest.raises(ForecastInputError):
        crps_parametric(near_normal, 0.0, tol=0.0)

    print("✓ Parametric CRPS limits correct")


def test_mse_validation() -> None:
    """Mean squared error and its input checks."""
    assert mse([1.0, 2.0], [0.0, 4.0]) == pytest.approx(2.5)
    with pytest.raises(ForecastInputError):
        mse([], [])
    with pytest.raises(ForecastInputError):
        mse([1.0], [1.0, 2.0])

    print("✓ MSE correct")


def test_rank_histogram_counts() -> None:
    """Ranks land in M + 1 bins; ties are spread over the tied ranks."""
    members = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    assert rank_histogram(members, [0.0, 2.5, 9.0]) == [1, 0, 1, 1]

    tied = np.ones((4000, 3))
    counts = rank_histogram(tied, np.ones(4000), seed=3)
    assert sum(counts) == 4000
    assert all(800 < c < 1200 for c in counts)

    statistic, p_value = talagrand_chi2([10, 10, 10])
    assert statistic == 0.0
    assert p_value == pytest.approx(1.0)

    with pytest.raises(ForecastInputError):
        rank_histogram(members, [1.0])

    print("✓ Rank histogram correct")


def test_exchangeable_ensembles_pass_uniformity() -> None:
    """Members and realization from one law give a flat rank histogram."""
    rng = np.random.default_rng(21)
    draws = rng.normal(size=(10000, 11))
    counts = rank_histogram(draws[:, :10], draws[:, 10], seed=1)
    _, p_value = talagrand_chi2(counts)
    assert p_value > 0.01

    print("✓ Exchangeable ensembles pass chi-square")


def test_pit_histogram() -> None:
    """Bins over [0, 1], rounding tolerance, and KS statistic."""
    counts, statistic, p_value = pit_histogram(np.linspace(0.0, 1.0, 101), bins=4)
    assert sum(counts) == 101
    assert statistic < 0.05
    assert p_value > 0.5

    pit_histogram([1.0 + 1e-12, -1e-12], bins=2)
    with pytest.raises(ForecastInputError):
        pit_histogram([1.1])
    with pytest.raises(ForecastInputError):
        pit_histogram([])

    print("✓ PIT histogram correct")


def test_ci_width() -> None:
    """Near-Gaussian width is 2·1.645·√V; the point mass has width 0."""
    params = ModelParams(
        family=ModelFamily.NIG, b=0.01, rho=RhoSchedule.constant(1.0), delivery_time=1.0
    )
    width: float = ci_width(params, ForecastState(m=3.0, V=4.0), level=0.9)
    assert width == pytest.approx(2.0 * stats.norm.ppf(0.95) * 2.0, rel=1e-3)
    assert ci_width(params, ForecastState(m=3.0, V=0.0)) == 0.0
    with pytest.raises(ForecastInputError):
        ci_width(params, ForecastState(m=3.0, V=1.0), level=1.0)

    print("✓ Interval widths correct")


def test_raw_only_report() -> None:
    """Without coefficients only raw scores and Talagrand histograms appear."""
    truth = RecoveryConfig.preset(Variable.TEMPERATURE).truth()
    dataset = generate_dataset(truth, n_issue=4, n_locations=10, n_members=8, seed=3, substeps=4)
    report = build_score_report(dataset)

    assert report.family is None
    assert not report.log_scale
    assert report.pit == []
    assert [s.horizon_h for s in report.horizons] == [12, 24, 36, 48]
    assert all(s.crps_model is None for s in report.horizons)
    assert all(h.total == 40 for h in report.talagrand)
    assert all(len(h.counts) == 9 for h in report.talagrand)

    frames = report.to_frames()
    assert set(frames) == {"scores", "talagrand", "uniformity"}
    assert set(frames["scores"]["metric"]) == {"mse_raw", "crps_raw"}

    print("✓ Raw-only report correct")


def test_report_under_the_true_model() -> None:
    """The generating law beats the biased raw ensemble and its PIT is flat."""
    truth = RecoveryConfig.preset(Variable.TEMPERATURE).truth()
    dataset = generate_dataset(truth, n_issue=10, n_locations=50, n_members=20, seed=4, substeps=5)
    report = build_score_report(
        dataset,
        calibration=_truth_calibration(Variable.TEMPERATURE),
        horizons=[12, 48],
        sample_size=200,
        ci_sample=10,
        threads=2,
    )
    shortest = report.horizons[0]
    assert shortest.horizon_h == 12
    assert shortest.n_records == 500
    assert shortest.n_scored == 200
    assert shortest.crps_model is not None and shortest.crps_model < shortest.crps_raw
    assert shortest.ci_width_mean is not None and shortest.ci_width_mean > 0.0
    assert [h.total for h in report.pit] == [200, 200]
    assert report.pit[0].p_value > 0.001

    frames = report.to_frames()
    assert set(frames) == {"scores", "talagrand", "pit", "uniformity"}
    assert len(frames["uniformity"]) == 4

    print("✓ True model verified")


def test_positive_family_scored_on_log_scale() -> None:
    """LogNig reports raw and model scores for log wind speed."""
    truth = RecoveryConfig.preset(Variable.WIND_SPEED).truth()
    dataset = generate_dataset(truth, n_issue=3, n_locations=10, n_members=6, seed=5, substeps=4)
    report = build_score_report(
        dataset, calibration=_truth_calibration(Variable.WIND_SPEED), horizons=[12], ci_sample=5
    )
    assert report.log_scale
    sample = dataset.horizon_sample(12)
    expected_crps: float = float(
        np.mean(crps_ensemble(np.log(sample.members), np.log(sample.realizations)))
    )
    scores = report.horizons[0]
    assert scores.crps_raw == pytest.approx(expected_crps, rel=1e-12)
    assert scores.mse_raw == pytest.approx(
        mse(np.log(sample.members).mean(axis=1), np.log(sample.realizations)), rel=1e-12
    )
    assert scores.crps_model is not None and math.isfinite(scores.crps_model)

    print("✓ Positive family scored on log scale")


if __name__ == "__main__":
    print("Running scoring tests...\n")
    test_crps_ensemble_matches_properscoring()
    test_crps_parametric_matches_quadrature()
    test_crps_parametric_limits()
    test_mse_validation()
    test_rank_histogram_counts()
    test_exchangeable_ensembles_pass_uniformity()
    test_pit_histogram()
    test_ci_width()
    test_raw_only_report()
    test_report_under_the_true_model()
    test_positive_family_scored_on_log_scale()
    print("\n✅ All scoring tests passed!")
