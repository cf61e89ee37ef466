"""Unit tests for the wind-power trading problem and the model comparison."""

import math

import numpy as np
import pytest

from domain.config import ExperimentConfig, ForecastSetup
from domain.errors import ForecastInputError
from domain.models import (
    ForecastState,
    MarketParams,
    ModelVariant,
    TradingConfig,
    VariantTag,
)
from domain.trading import (
    WindTradingProblem,
    compare_models,
    compare_profits,
    evaluate_policy,
    lsmc_config,
    policy_positions,
    power_curve,
    profit,
    raw_profit,
    run_point,
    simulate_joint,
    train_policy,
)

SETUP = ForecastSetup()
PARAMS = SETUP.model_params(delivery_time=24.0)
MODEL_A = ModelVariant(tag=VariantTag.A)
MODEL_B = ModelVariant(tag=VariantTag.B, sigma_m=0.16 * math.sqrt(0.032))


def _small_trading(**overrides: object) -> TradingConfig:
    return TradingConfig(**{"n_train": 2000, "n_test": 1000, **overrides})


def test_power_curve() -> None:
    """Zero below cut-in, one above rated speed, linear in between."""
    assert power_curve(3.0, m_min=3.3, m_max=25.0) == 0.0
    assert power_curve(30.0, m_min=3.3, m_max=25.0) == 1.0
    assert power_curve(14.15, m_min=3.3, m_max=25.0) == pytest.approx(0.5)
    np.testing.assert_allclose(power_curve(np.array([4.0, 8.0]), 4.0, 8.0), [0.0, 1.0])
    with pytest.raises(ForecastInputError):
        power_curve(5.0, m_min=5.0, m_max=4.0)

    print("✓ Power curve correct")


def test_joint_paths_layout_and_start() -> None:
    """Decision-time arrays start at (S0, m0, V0); model B carries no V."""
    trading = _small_trading()
    market = MarketParams()
    paths = simulate_joint(MODEL_A, PARAMS, SETUP.initial_state(), market, trading, n=500, seed=1)
    assert paths.price.shape == (500, 4)
    assert paths.V is not None and paths.V.shape == (500, 4)
    np.testing.assert_array_equal(paths.price[:, 0], 40.0)
    np.testing.assert_array_equal(paths.m[:, 0], 5.38)
    np.testing.assert_array_equal(paths.V[:, 0], 0.032)
    assert np.all(paths.m_T > 0.0)
    assert paths.delta_s.shape == (500, 4)

    b_paths = simulate_joint(MODEL_B, PARAMS, SETUP.initial_state(), market, trading, n=500)
    assert b_paths.V is None
    with pytest.raises(ForecastInputError):
        b_paths.states(stage=1, dim=3)
    assert b_paths.states(stage=1, dim=2).shape == (500, 2)

    print("✓ Joint path layout correct")


def test_deterministic_price_is_linear_in_time() -> None:
    """σ_S = 0 leaves S_t = S_0 + μ_S·t at every decision time and at delivery."""
    market = MarketParams(mu_s=0.5, sigma_s=0.0)
    trading = _small_trading()
    for variant in (MODEL_A, MODEL_B):
        paths = simulate_joint(variant, PARAMS, SETUP.initial_state(), market, trading, n=50)
        expected = 40.0 + 0.5 * np.asarray(trading.decision_times)
        np.testing.assert_allclose(paths.price, np.tile(expected, (50, 1)), atol=1e-9)
        np.testing.assert_allclose(paths.price_T, 40.0 + 0.5 * 24.0, atol=1e-9)

    print("✓ Deterministic price path correct")


def test_price_and_forecast_increments_correlated() -> None:
    """corr(ΔS, Δlog m) over a trading interval is λ for both models."""
    market = MarketParams(correlation=-0.5)
    trading = _small_trading()
    n: int = 20000
    bound: float = 4.0 * (1.0 - 0.25) / math.sqrt(n)
    for variant in (MODEL_A, MODEL_B):
        paths = simulate_joint(
            variant, PARAMS, SETUP.initial_state(), market, trading, n=n, seed=4, substeps=10
        )
        d_price = paths.price[:, 2] - paths.price[:, 1]
        d_log_m = np.log(paths.m[:, 2]) - np.log(paths.m[:, 1])
        assert abs(float(np.corrcoef(d_price, d_log_m)[0, 1]) + 0.5) < bound

    print("✓ Price and forecast correlated as configured")


def test_joint_simulation_checks_and_threads() -> None:
    """Bad starts are rejected; thread count does not change the paths."""
    market = MarketParams()
    trading = _small_trading()
    with pytest.raises(ForecastInputError):
        simulate_joint(MODEL_A, PARAMS, ForecastState(t=1.0, m=5.0, V=0.03), market, trading, n=10)
    with pytest.raises(ForecastInputError):
        simulate_joint(
            MODEL_A, SETUP.model_params(delivery_time=30.0), SETUP.initial_state(),
            market, trading, n=10,
        )

    one = simulate_joint(MODEL_A, PARAMS, SETUP.initial_state(), market, trading, n=9000, seed=2)
    four = simulate_joint(
        MODEL_A, PARAMS, SETUP.initial_state(), market, trading, n=9000, seed=2, threads=4
    )
    np.testing.assert_array_equal(one.price, four.price)
    np.testing.assert_array_equal(one.m_T, four.m_T)

    print("✓ Joint simulation validated and deterministic")


def test_profit_identities() -> None:
    """Mark-to-market and trade-by-trade profits agree; the zero policy earns f·(S_T − K)."""
    trading = _small_trading()
    paths = simulate_joint(MODEL_A, PARAMS, SETUP.initial_state(), MarketParams(), trading, n=300)
    rng = np.random.default_rng(0)
    positions = rng.uniform(-1.0, 1.0, size=(300, 4))

    np.testing.assert_allclose(
        profit(paths, positions, trading), raw_profit(paths, positions, trading), atol=1e-10
    )
    produced = power_curve(paths.m_T, trading.m_min, trading.m_max)
    np.testing.assert_allclose(
        profit(paths, np.zeros((300, 4)), trading), produced * (paths.price_T - trading.penalty)
    )
    gap = profit(paths, positions, trading, include_penalty=False) - profit(
        paths, positions, trading
    )
    np.testing.assert_allclose(gap, trading.penalty * np.abs(produced - positions[:, -1]))

    with pytest.raises(ForecastInputError):
        profit(paths, np.zeros((300, 3)), trading)

    print("✓ Profit identities hold")


def test_stage_factors_multiply_to_utility() -> None:
    """For a constant position the factors give exp(−α·profit)."""
    trading = _small_trading()
    paths = simulate_joint(MODEL_A, PARAMS, SETUP.initial_state(), MarketParams(), trading, n=200)
    problem = WindTradingProblem(paths, MODEL_A, trading)
    for control in (-0.3, 0.0, 0.4):
        product = problem.terminal_factor(control)
        for stage in range(trading.n_stages - 1):
            product = product * problem.stage_factor(stage, control)
        constant = np.full((200, 4), control)
        utility = np.exp(-trading.risk_aversion * profit(paths, constant, trading))
        np.testing.assert_allclose(product, utility, rtol=1e-10)
    assert problem.states(0).shape == (200, 3)

    print("✓ Stage factors consistent with CARA utility")


def test_no_risk_no_penalty_means_no_trading() -> None:
    """σ_S = μ_S = K = 0 makes every position equivalent; the policy stays flat."""
    market = MarketParams(sigma_s=0.0)
    trading = _small_trading(penalty=0.0)
    config = lsmc_config(trading, market, cells_per_dim=4, substeps=5, seed=1)
    policy = train_policy(MODEL_A, PARAMS, SETUP.initial_state(), market, trading, config)
    test_paths = simulate_joint(
        MODEL_A, PARAMS, SETUP.initial_state(), market, trading, n=500, seed=9, substeps=5
    )
    np.testing.assert_array_equal(policy_positions(policy, test_paths, MODEL_A), 0.0)

    print("✓ Flat policy without risk or penalty")


def test_no_production_means_no_position() -> None:
    """V0 = 0 below cut-in: nothing is produced and any position only costs K."""
    market = MarketParams(sigma_s=0.0)
    trading = _small_trading()
    initial = ForecastState(t=0.0, m=3.0, V=0.0)
    config = lsmc_config(trading, market, cells_per_dim=4, substeps=5, seed=2)
    policy = train_policy(MODEL_A, PARAMS, initial, market, trading, config)
    paths = simulate_joint(MODEL_A, PARAMS, initial, market, trading, n=200, seed=3, substeps=5)
    np.testing.assert_array_equal(policy_positions(policy, paths, MODEL_A), 0.0)
    stats, profits = evaluate_policy(policy, paths, MODEL_A, trading)
    assert stats.mean == 0.0
    np.testing.assert_array_equal(profits, 0.0)

    print("✓ No position without production")


def test_middle_stages_stay_flat_without_price_moves() -> None:
    """With ΔS ≡ 0 and λ = 0 a middle-stage position earns nothing: decide gives 0 at any K."""
    market = MarketParams(sigma_s=0.0, correlation=0.0)
    initial = SETUP.initial_state()
    for penalty in (0.0, 10.0):
        trading = _small_trading(penalty=penalty, n_train=8000)
        config = lsmc_config(trading, market, cells_per_dim=4, substeps=5, seed=6)
        policy = train_policy(MODEL_A, PARAMS, initial, market, trading, config)
        train = simulate_joint(
            MODEL_A, PARAMS, initial, market, trading, n=8000, seed=6, substeps=5
        )
        for stage in range(1, trading.n_stages - 1):
            states = train.states(stage=stage, dim=3)
            cells = policy.stages[stage].partition.locate(states)
            occupied = sorted(set(cells.tolist()))
            centroids = np.array([states[cells == c].mean(axis=0) for c in occupied])
            np.testing.assert_array_equal(policy.decide(stage, centroids), 0.0)

        last = trading.n_stages - 1
        decided = policy.decide(last, train.states(stage=last, dim=3))
        if penalty == 0.0:
            np.testing.assert_array_equal(decided, 0.0)
        else:
            assert float(np.max(decided)) > 0.05

    print("✓ Middle stages flat without price moves")


def test_last_stage_matches_brute_force_minimizer() -> None:
    """Deterministic price: the last decision minimizes E[exp(α(K|f − φ| − f·S))] given m."""
    market = MarketParams(sigma_s=0.0)
    trading = _small_trading(n_train=40000)
    config = lsmc_config(trading, market, cells_per_dim=15, substeps=1, seed=5)
    initial = SETUP.initial_state()
    policy = train_policy(MODEL_B, PARAMS, initial, market, trading, config)

    train = simulate_joint(MODEL_B, PARAMS, initial, market, trading, n=40000, seed=5, substeps=1)
    last = trading.n_stages - 1
    states = train.states(stage=last, dim=2)
    stage = policy.stages[last]
    cells = stage.partition.locate(states)
    occupied = sorted(set(cells.tolist()))
    queries = np.array([states[cells == c].mean(axis=0) for c in occupied[1:-1]])

    horizon: float = trading.delivery_time - trading.decision_times[-1]
    spread: float = float(MODEL_B.sigma_m) * math.sqrt(horizon)
    z = np.random.default_rng(11).standard_normal(200000)
    grid = np.asarray(trading.control_grid(0.0))
    alpha, penalty = trading.risk_aversion, trading.penalty
    decided = stage.decide(queries)
    for (price, m), choice in zip(queries, decided):
        m_t = m * np.exp(-0.5 * spread**2 + spread * z)
        f = power_curve(m_t, trading.m_min, trading.m_max)
        weight = np.exp(-alpha * f * price)
        objective = [np.mean(weight * np.exp(alpha * penalty * np.abs(f - phi))) for phi in grid]
        oracle: float = float(grid[int(np.argmin(objective))])
        assert abs(choice - oracle) <= 0.02 + 1e-12

    print("✓ Last-stage policy matches brute-force minimizer")


def test_paired_comparison() -> None:
    """Mean difference, paired standard error and the 95% flag."""
    base = np.array([10.0, 12.0, 9.0, 11.0])
    shifted = compare_profits(base + 1.0, base)
    assert shifted.diff_mean == pytest.approx(1.0)
    assert shifted.diff_stderr == 0.0
    assert shifted.significant
    assert shifted.relative_pct == pytest.approx(100.0 / 10.5)

    noisy = compare_profits(np.array([1.0, -1.0, 1.0, -1.0]), np.zeros(4))
    assert not noisy.significant
    with pytest.raises(ForecastInputError):
        compare_profits(np.zeros(3), np.zeros(4))

    print("✓ Paired comparison correct")


def _small_experiment(**overrides: object) -> ExperimentConfig:
    return ExperimentConfig(
        **{
            "seed": 3,
            "trading": _small_trading(),
            "cells_per_dim": 4,
            "substeps": 5,
            "mu_s_levels": [0.5],
            "v0_levels": [0.016],
            **overrides,
        }
    )


def test_run_point_uses_common_random_numbers() -> None:
    """Both policies are scored on the same paths, so the paired error is smaller."""
    experiment = _small_experiment()
    point = run_point(
        experiment,
        sweep="mu_s",
        value=0.5,
        market=experiment.market.model_copy(update={"mu_s": 0.5}),
        v0=0.032,
        keep_policies=True,
    )
    assert point.stats_a.n == point.stats_b.n == 1000
    independent: float = math.hypot(point.stats_a.stderr, point.stats_b.stderr)
    assert point.comparison.diff_stderr < independent
    assert set(point.policies) == {"A", "B"}
    assert point.policies["A"].stages[0].partition.dim == 3
    assert point.policies["B"].stages[0].partition.dim == 2

    print("✓ Sweep point uses common random numbers")


def test_compare_models_small_and_reproducible() -> None:
    """One point per sweep value, identical across thread counts."""
    experiment = _small_experiment()
    first = compare_models(experiment)
    again = compare_models(experiment, threads=3)
    relative = first.relative_frame()
    assert list(relative["sweep"]) == ["mu_s", "v0"]
    assert list(relative["value"]) == [0.5, 0.016]
    assert relative.equals(again.relative_frame())

    summary = first.summary_frame()
    assert len(summary) == 4
    assert set(summary["model"]) == {"A", "B"}
    assert (summary["ci_low"] <= summary["mean"]).all()
    assert first.points[0].policies == {}

    print("✓ Model comparison reproducible")


@pytest.mark.slow
def test_full_scale_comparison_shape() -> None:
    """Default experiment: every sweep point is scored on 10⁵ shared test paths."""
    result = compare_models(ExperimentConfig(), threads=4)
    relative = result.relative_frame()
    assert list(relative["sweep"]) == ["mu_s"] * 3 + ["v0"] * 3
    assert all(p.stats_a.n == 100_000 for p in result.points)
    assert relative["relative_pct"].notna().all()

    print("✓ Full-scale comparison complete")


def _desk_experiment(**overrides: object) -> ExperimentConfig:
    """Default market and forecast with a coarser partition than the full experiment."""
    return ExperimentConfig(
        **{
            "seed": 5,
            "trading": TradingConfig(n_train=200_000, n_test=100_000),
            "cells_per_dim": 4,
            "substeps": 10,
            "mu_s_levels": [],
            "v0_levels": [],
            **overrides,
        }
    )


@pytest.mark.slow
def test_profit_falls_with_forecast_uncertainty() -> None:
    """Martingale price: both models earn less at every step up in V0."""
    result = compare_models(_desk_experiment(v0_levels=[0.016, 0.032, 0.064]), threads=4)
    summary = result.summary_frame()
    assert list(summary["value"].unique()) == [0.016, 0.032, 0.064]
    for model in ("A", "B"):
        means = summary[summary["model"] == model]["mean"].to_numpy()
        assert np.all(np.diff(means) < 0.0), (model, means)

    print("✓ Profit decreases with forecast uncertainty")


@pytest.mark.slow
def test_price_trend_raises_profit_for_both_models() -> None:
    """μ_S = ±0.5 pays for both models; model A stays within 10% of model B."""
    result = compare_models(_desk_experiment(mu_s_levels=[-0.5, 0.0, 0.5]), threads=4)
    by_mu = {point.value: point for point in result.points}
    flat = by_mu[0.0]
    for mu_s in (-0.5, 0.5):
        point = by_mu[mu_s]
        assert point.stats_a.mean > flat.stats_a.mean + 5.0
        assert point.stats_b.mean > flat.stats_b.mean + 5.0
        # Both models take the same speculative position −μ_S/(ασ_S²) around E[f].
        assert abs(point.comparison.relative_pct) < 10.0
        independent: float = math.hypot(point.stats_a.stderr, point.stats_b.stderr)
        assert point.comparison.diff_stderr < independent

    print("✓ Price trend raises profits of both models")


if __name__ == "__main__":
    print("Running trading tests...\n")
    test_power_curve()
    test_joint_paths_layout_and_start()
    test_deterministic_price_is_linear_in_time()
    test_price_and_forecast_increments_correlated()
    test_joint_simulation_checks_and_threads()
    test_profit_identities()
    test_stage_factors_multiply_to_utility()
    test_no_risk_no_penalty_means_no_trading()
    test_no_production_means_no_position()
    test_middle_stages_stay_flat_without_price_moves()
    test_last_stage_matches_brute_force_minimizer()
    test_paired_comparison()
    test_run_point_uses_common_random_numbers()
    test_compare_models_small_and_reproducible()
    print("\n✅ All trading tests passed!")
