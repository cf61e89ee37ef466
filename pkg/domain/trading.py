"""Wind-power intraday trading under CARA utility.

A producer sells φ_i MWh ahead at each decision time t_i, pays the price move
on the open position until the next decision, and settles the gap between
produced power f(m_T) and the final position at the delivery price plus a
penalty K per MWh. Policies are trained by regression Monte Carlo either
under the stochastic-uncertainty forecast dynamics (model A, state S, m, V)
or a constant-diffusion forecast (model B, state S, m), and both are scored
on the same model A test paths.
"""

import logging
import math
from typing import Optional

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, model_validator

from domain.config import ExperimentConfig
from domain.errors import ForecastInputError
from domain.forecast import (
    advance_state,
    draw_terminal,
    substep_increments,
)
from domain.lsmc import PolicyTable, solve_backward
from domain.models import (
    ForecastState,
    LsmcConfig,
    MarketParams,
    ModelParams,
    ModelVariant,
    ProfitStats,
    TradingConfig,
    VariantTag,
)
from domain.streams import map_blocks

logger = logging.getLogger(__name__)

# Two-sided 95% normal quantile for the paired significance flag.
SIGNIFICANCE_Z: float = 1.96

# Offsets of the three seeds derived from an experiment seed.
TRAIN_A_OFFSET: int = 0
TRAIN_B_OFFSET: int = 1
TEST_OFFSET: int = 2


def power_curve(m: ArrayLike, m_min: float, m_max: float) -> float | NDArray[np.float64]:
    """
    Produced fraction of capacity at wind speed m.

    f(m) = ((m − m_min)⁺ − (m − m_max)⁺) / (m_max − m_min)

    Args:
        m: Wind speed(s) in m/s
        m_min: Cut-in speed
        m_max: Rated speed

    Returns:
        Fraction in [0, 1], scalar for scalar input
    """
    if not 0.0 < m_min < m_max:
        raise ForecastInputError(f"Need 0 < m_min < m_max, got {m_min}, {m_max}")
    speed: NDArray[np.float64] = np.asarray(m, dtype=np.float64)
    fraction: NDArray[np.float64] = np.clip((speed - m_min) / (m_max - m_min), 0.0, 1.0)
    if fraction.ndim == 0:
        return float(fraction)
    return fraction


class JointPaths(BaseModel):
    """Price and forecast observed at the decision times, plus delivery values."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    decision_times: list[float]
    delivery_time: float
    price: NDArray[np.float64]
    m: NDArray[np.float64]
    V: Optional[NDArray[np.float64]] = None
    price_T: NDArray[np.float64]
    m_T: NDArray[np.float64]

    @model_validator(mode="after")
    def validate_shapes(self) -> "JointPaths":
        expected: tuple[int, int] = (self.price.shape[0], len(self.decision_times))
        if self.price.shape != expected or self.m.shape != expected:
            raise ValueError(f"Decision-time arrays must have shape {expected}")
        if self.V is not None and self.V.shape != expected:
            raise ValueError(f"V must have shape {expected}, got {self.V.shape}")
        if self.price_T.shape != (expected[0],) or self.m_T.shape != (expected[0],):
            raise ValueError("Delivery arrays must have one entry per path")
        return self

    @property
    def n_paths(self) -> int:
        return int(self.price.shape[0])

    @property
    def n_stages(self) -> int:
        return len(self.decision_times)

    @property
    def delta_s(self) -> NDArray[np.float64]:
        """ΔS_i = S_{t_{i+1}} − S_{t_i}, with S_T closing the last interval."""
        closing: NDArray[np.float64] = np.column_stack([self.price[:, 1:], self.price_T])
        return closing - self.price

    def states(self, stage: int, dim: int) -> NDArray[np.float64]:
        """Regression state (S, m, V) or (S, m) at a decision time."""
        if dim == 2:
            return np.column_stack([self.price[:, stage], self.m[:, stage]])
        if self.V is None:
            raise ForecastInputError("Three-dimensional states need simulated V")
        return np.column_stack([self.price[:, stage], self.m[:, stage], self.V[:, stage]])


# Helper Functions
def _price_step(
    market: MarketParams,
    price: NDArray[np.float64],
    dt: float,
    z_mean: NDArray[np.float64],
    z_own: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Exact arithmetic Brownian step driven by λ·z_mean + √(1 − λ²)·z_own."""
    lam: float = market.correlation
    shock: NDArray[np.float64] = lam * z_mean + math.sqrt(1.0 - lam * lam) * z_own
    return price + market.mu_s * dt + market.sigma_s * math.sqrt(dt) * shock


def simulate_joint(
    variant: ModelVariant,
    params: ModelParams,
    initial: ForecastState,
    market: MarketParams,
    trading: TradingConfig,
    n: int,
    seed: int = 0,
    substeps: int = 60,
    threads: int = 1,
) -> JointPaths:
    """
    Simulate (S, m, V) at the decision times and (S_T, m_T) at delivery.

    Model A advances (m, V) with the forecast sub-step and draws m_T exactly
    over the last interval. Model B moves m as a driftless log-normal with
    constant diffusion sigma_m per √h, exactly over each interval. The price
    noise has correlation λ with the noise of m in every step.

    Args:
        variant: Model A or model B
        params: Forecast family, shape and rate (model A)
        initial: Forecast state at time 0; S_0 = market.s0
        market: Price dynamics
        trading: Decision times and delivery time
        n: Number of paths
        seed: Root seed of the block streams
        substeps: Sub-steps per interval for model A
        threads: Worker threads (does not change the result)

    Returns:
        JointPaths; V is None for model B
    """
    if initial.t != 0.0:
        raise ForecastInputError(f"Trading paths start at time 0, got {initial.t}")
    if variant.tag == VariantTag.A and params.delivery_time != trading.delivery_time:
        raise ForecastInputError(
            f"Forecast delivery {params.delivery_time}h differs from trading "
            f"delivery {trading.delivery_time}h"
        )
    if variant.tag == VariantTag.A and initial.V < 0.0:
        raise ForecastInputError("Uncertainty factor V must be non-negative")
    if initial.m <= 0.0:
        raise ForecastInputError("Wind-speed forecasts need a positive mean")

    times: list[float] = list(trading.decision_times)
    edges: list[float] = [0.0, *times, trading.delivery_time]
    intervals: list[tuple[float, float]] = list(zip(edges[:-1], edges[1:]))
    n_stages: int = len(times)
    clock: list[list[float]] = [
        substep_increments(params=params, t0=a, t1=b, substeps=substeps)
        if variant.tag == VariantTag.A
        else []
        for a, b in intervals
    ]

    def run_block(
        start: int, stop: int, rng: np.random.Generator
    ) -> tuple[NDArray[np.float64], ...]:
        size: int = stop - start
        price: NDArray[np.float64] = np.full(size, market.s0)
        m: NDArray[np.float64] = np.full(size, initial.m)
        V: NDArray[np.float64] = np.full(size, initial.V)
        out_s: NDArray[np.float64] = np.empty((size, n_stages))
        out_m: NDArray[np.float64] = np.empty((size, n_stages))
        out_v: NDArray[np.float64] = np.empty((size, n_stages))

        for k, (a, b) in enumerate(intervals):
            last: bool = k == len(intervals) - 1
            if b > a and variant.tag == VariantTag.B:
                sigma: float = float(variant.sigma_m)
                z_mean = rng.standard_normal(size)
                price = _price_step(market, price, b - a, z_mean, rng.standard_normal(size))
                drift: float = -0.5 * sigma * sigma * (b - a)
                m = m * np.exp(drift + sigma * math.sqrt(b - a) * z_mean)
            elif b > a and last:
                z_mean = rng.standard_normal(size)
                m = draw_terminal(
                    family=params.family, b=params.b, m=m, V=V, rng=rng, normal=z_mean
                )
                price = _price_step(market, price, b - a, z_mean, rng.standard_normal(size))
            elif b > a:
                dt: float = (b - a) / substeps
                for dtheta in clock[k]:
                    z_mean = rng.standard_normal(size)
                    z_var = rng.standard_normal(size)
                    price = _price_step(market, price, dt, z_mean, rng.standard_normal(size))
                    m, V = advance_state(
                        family=params.family, b=params.b, m=m, V=V,
                        dtheta=dtheta, z_mean=z_mean, z_var=z_var,
                    )
            if not last:
                out_s[:, k] = price
                out_m[:, k] = m
                out_v[:, k] = V
        return out_s, out_m, out_v, price, m

    blocks = map_blocks(fn=run_block, n=n, seed=seed, threads=threads)
    logger.debug("simulated %d model %s trading paths", n, variant.tag.value)
    return JointPaths(
        decision_times=times,
        delivery_time=trading.delivery_time,
        price=np.concatenate([blk[0] for blk in blocks]),
        m=np.concatenate([blk[1] for blk in blocks]),
        V=np.concatenate([blk[2] for blk in blocks]) if variant.tag == VariantTag.A else None,
        price_T=np.concatenate([blk[3] for blk in blocks]),
        m_T=np.concatenate([blk[4] for blk in blocks]),
    )


def profit(
    paths: JointPaths,
    positions: ArrayLike,
    trading: TradingConfig,
    include_penalty: Optional[bool] = None,
) -> NDArray[np.float64]:
    """
    Realized profit per path.

    f(m_T)·S_T − Σ φ_i ΔS_i − K·|f(m_T) − φ_{N−1}|

    Args:
        paths: Joint paths
        positions: φ per path and decision time, shape (n, N)
        trading: Power curve, penalty and default penalty switch
        include_penalty: Overrides trading.include_penalty
    """
    phi: NDArray[np.float64] = np.asarray(positions, dtype=np.float64)
    if phi.shape != paths.price.shape:
        raise ForecastInputError(f"Positions must have shape {paths.price.shape}")
    produced = power_curve(paths.m_T, m_min=trading.m_min, m_max=trading.m_max)
    total: NDArray[np.float64] = produced * paths.price_T - np.sum(phi * paths.delta_s, axis=1)
    penalized: bool = trading.include_penalty if include_penalty is None else include_penalty
    if penalized:
        total = total - trading.penalty * np.abs(produced - phi[:, -1])
    return total


def raw_profit(
    paths: JointPaths,
    positions: ArrayLike,
    trading: TradingConfig,
    include_penalty: Optional[bool] = None,
) -> NDArray[np.float64]:
    """Cash flows trade by trade: sales, position changes, imbalance settlement, penalty."""
    phi: NDArray[np.float64] = np.asarray(positions, dtype=np.float64)
    produced = power_curve(paths.m_T, m_min=trading.m_min, m_max=trading.m_max)
    intraday: NDArray[np.float64] = phi[:, 0] * paths.price[:, 0] + np.sum(
        np.diff(phi, axis=1) * paths.price[:, 1:], axis=1
    )
    imbalance: NDArray[np.float64] = (produced - phi[:, -1]) * paths.price_T
    total: NDArray[np.float64] = intraday + imbalance
    penalized: bool = trading.include_penalty if include_penalty is None else include_penalty
    if penalized:
        total = total - trading.penalty * np.abs(produced - phi[:, -1])
    return total


class WindTradingProblem:
    """
    Stage factors of the CARA trading problem on a set of training paths.

    Minimizing E[exp(−α·profit)] factorizes into exp(α φ_i ΔS_i) for the
    earlier stages and exp(α(φ ΔS_{N−1} − f(m_T)S_T + K|f(m_T) − φ|)) for the
    last one. The penalty always enters training.
    """

    def __init__(self, paths: JointPaths, variant: ModelVariant, trading: TradingConfig) -> None:
        if paths.n_stages != trading.n_stages:
            raise ForecastInputError(
                f"Paths have {paths.n_stages} decision times, config {trading.n_stages}"
            )
        self.paths: JointPaths = paths
        self.dim: int = variant.state_dim
        self.alpha: float = trading.risk_aversion
        self.penalty: float = trading.penalty
        self.delta_s: NDArray[np.float64] = paths.delta_s
        self.produced: NDArray[np.float64] = np.asarray(
            power_curve(paths.m_T, m_min=trading.m_min, m_max=trading.m_max)
        )

    @property
    def n_stages(self) -> int:
        return self.paths.n_stages

    def states(self, stage: int) -> NDArray[np.float64]:
        return self.paths.states(stage=stage, dim=self.dim)

    def terminal_factor(self, control: float) -> NDArray[np.float64]:
        exponent: NDArray[np.float64] = (
            control * self.delta_s[:, -1]
            - self.produced * self.paths.price_T
            + self.penalty * np.abs(self.produced - control)
        )
        return np.exp(self.alpha * exponent)

    def stage_factor(self, stage: int, control: float) -> NDArray[np.float64]:
        return np.exp(self.alpha * control * self.delta_s[:, stage])


def lsmc_config(
    trading: TradingConfig,
    market: MarketParams,
    cells_per_dim: int,
    substeps: int,
    seed: int,
) -> LsmcConfig:
    """Regression settings with the position grid matching the price trend."""
    return LsmcConfig(
        n_paths=trading.n_train,
        cells_per_dim=cells_per_dim,
        control_grid=trading.control_grid(market.mu_s),
        substeps=substeps,
        seed=seed,
    )


def train_policy(
    variant: ModelVariant,
    params: ModelParams,
    initial: ForecastState,
    market: MarketParams,
    trading: TradingConfig,
    config: LsmcConfig,
    threads: int = 1,
) -> PolicyTable:
    """
    Train a feedback policy on paths simulated under `variant`.

    Args:
        variant: Dynamics the trader believes in
        params: Forecast dynamics of model A
        initial: Forecast state at time 0
        market: Price dynamics
        trading: Trading problem
        config: Path count, cells, control grid, sub-steps and seed
        threads: Worker threads (results do not depend on it)

    Returns:
        PolicyTable over the decision times
    """
    config.check_dimension(variant.state_dim)
    paths: JointPaths = simulate_joint(
        variant=variant,
        params=params,
        initial=initial,
        market=market,
        trading=trading,
        n=config.n_paths,
        seed=config.seed,
        substeps=config.substeps,
        threads=threads,
    )
    problem = WindTradingProblem(paths=paths, variant=variant, trading=trading)
    policy: PolicyTable = solve_backward(problem=problem, config=config, threads=threads)
    logger.info(
        "trained model %s policy: certainty equivalent %.4f EUR",
        variant.tag.value, -math.log(policy.value_estimate) / trading.risk_aversion,
    )
    return policy


def policy_positions(
    policy: PolicyTable, paths: JointPaths, variant: ModelVariant
) -> NDArray[np.float64]:
    """Positions chosen by the policy along every path."""
    if policy.n_stages != paths.n_stages:
        raise ForecastInputError(
            f"Policy has {policy.n_stages} stages, paths {paths.n_stages}"
        )
    return np.column_stack(
        [
            policy.decide(stage, paths.states(stage=stage, dim=variant.state_dim))
            for stage in range(paths.n_stages)
        ]
    )


def evaluate_policy(
    policy: PolicyTable,
    paths: JointPaths,
    variant: ModelVariant,
    trading: TradingConfig,
) -> tuple[ProfitStats, NDArray[np.float64]]:
    """
    Realized profits of a trained policy on test paths.

    Args:
        policy: Trained policy
        paths: Model A test paths
        variant: Variant the policy was trained under (sets its state)
        trading: Power curve, penalty and penalty switch

    Returns:
        (ProfitStats, per-path profits)
    """
    if paths.V is None:
        raise ForecastInputError("Policies are evaluated on model A paths")
    positions: NDArray[np.float64] = policy_positions(
        policy=policy, paths=paths, variant=variant
    )
    profits: NDArray[np.float64] = profit(paths=paths, positions=positions, trading=trading)
    return ProfitStats.from_samples(profits), profits


class PairedComparison(BaseModel):
    """Model A against model B on shared test paths."""

    mean_a: float
    mean_b: float
    diff_mean: float
    diff_stderr: float
    relative_pct: float
    significant: bool


def compare_profits(
    profits_a: NDArray[np.float64], profits_b: NDArray[np.float64]
) -> PairedComparison:
    """
    Paired difference of per-path profits.

    The difference is significant at 95% when |mean| > 1.96·stderr.
    """
    if profits_a.shape != profits_b.shape:
        raise ForecastInputError("Paired profits must come from the same paths")
    diff: NDArray[np.float64] = profits_a - profits_b
    n: int = int(diff.size)
    diff_mean: float = float(np.mean(diff))
    diff_stderr: float = float(np.std(diff, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    mean_a: float = float(np.mean(profits_a))
    mean_b: float = float(np.mean(profits_b))
    relative: float = 100.0 * (mean_a - mean_b) / abs(mean_b) if mean_b != 0.0 else math.nan
    return PairedComparison(
        mean_a=mean_a,
        mean_b=mean_b,
        diff_mean=diff_mean,
        diff_stderr=diff_stderr,
        relative_pct=relative,
        significant=abs(diff_mean) > SIGNIFICANCE_Z * diff_stderr,
    )


class SweepPoint(BaseModel):
    """Outcome of one experiment setting."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sweep: str
    value: float
    stats_a: ProfitStats
    stats_b: ProfitStats
    comparison: PairedComparison
    policies: dict[str, PolicyTable] = {}


class ComparisonResult(BaseModel):
    """Both sweeps of the model comparison."""

    points: list[SweepPoint]

    def relative_frame(self) -> pd.DataFrame:
        """One row per sweep point with the paired comparison."""
        return pd.DataFrame(
            [
                {"sweep": p.sweep, "value": p.value, **p.comparison.model_dump()}
                for p in self.points
            ]
        )

    def summary_frame(self) -> pd.DataFrame:
        """One row per sweep point and model with profit statistics."""
        rows: list[dict[str, object]] = []
        for p in self.points:
            for tag, stats in ((VariantTag.A, p.stats_a), (VariantTag.B, p.stats_b)):
                rows.append(
                    {
                        "sweep": p.sweep,
                        "value": p.value,
                        "model": tag.value,
                        **stats.model_dump(),
                        "relative_pct": p.comparison.relative_pct,
                        "significant": p.comparison.significant,
                    }
                )
        return pd.DataFrame(rows)


def run_point(
    experiment: ExperimentConfig,
    sweep: str,
    value: float,
    market: MarketParams,
    v0: float,
    threads: int = 1,
    keep_policies: bool = False,
) -> SweepPoint:
    """
    Train both models and score them on shared model A test paths.

    Every point uses the same three seeds derived from experiment.seed, so
    points of a sweep also share random numbers.
    """
    trading: TradingConfig = experiment.trading
    params: ModelParams = experiment.forecast.model_params(delivery_time=trading.delivery_time)
    initial: ForecastState = experiment.forecast.initial_state(v0=v0)
    variants: dict[VariantTag, ModelVariant] = {
        VariantTag.A: ModelVariant(tag=VariantTag.A),
        VariantTag.B: ModelVariant(tag=VariantTag.B, sigma_m=experiment.sigma_m(v0)),
    }
    offsets: dict[VariantTag, int] = {VariantTag.A: TRAIN_A_OFFSET, VariantTag.B: TRAIN_B_OFFSET}

    test_paths: JointPaths = simulate_joint(
        variant=variants[VariantTag.A],
        params=params,
        initial=initial,
        market=market,
        trading=trading,
        n=trading.n_test,
        seed=experiment.seed + TEST_OFFSET,
        substeps=experiment.substeps,
        threads=threads,
    )
    stats: dict[VariantTag, ProfitStats] = {}
    profits: dict[VariantTag, NDArray[np.float64]] = {}
    policies: dict[str, PolicyTable] = {}
    for tag, variant in variants.items():
        config: LsmcConfig = lsmc_config(
            trading=trading,
            market=market,
            cells_per_dim=experiment.cells_per_dim,
            substeps=experiment.substeps,
            seed=experiment.seed + offsets[tag],
        )
        policy: PolicyTable = train_policy(
            variant=variant,
            params=params,
            initial=initial,
            market=market,
            trading=trading,
            config=config,
            threads=threads,
        )
        stats[tag], profits[tag] = evaluate_policy(
            policy=policy, paths=test_paths, variant=variant, trading=trading
        )
        if keep_policies:
            policies[tag.value] = policy

    comparison: PairedComparison = compare_profits(profits[VariantTag.A], profits[VariantTag.B])
    logger.info(
        "%s=%g: A %.3f, B %.3f EUR, relative %+.2f%%%s",
        sweep, value, comparison.mean_a, comparison.mean_b, comparison.relative_pct,
        " (significant)" if comparison.significant else "",
    )
    return SweepPoint(
        sweep=sweep,
        value=value,
        stats_a=stats[VariantTag.A],
        stats_b=stats[VariantTag.B],
        comparison=comparison,
        policies=policies,
    )


def compare_models(
    experiment: ExperimentConfig, threads: int = 1, keep_policies: bool = False
) -> ComparisonResult:
    """
    Price-trend sweep over mu_s_levels and uncertainty sweep over v0_levels.

    Args:
        experiment: Forecast, market, trading and sweep settings
        threads: Worker threads (results do not depend on it)
        keep_policies: Keep trained policies on the result for saving

    Returns:
        ComparisonResult with one point per sweep value
    """
    points: list[SweepPoint] = []
    for mu_s in experiment.mu_s_levels:
        points.append(
            run_point(
                experiment=experiment,
                sweep="mu_s",
                value=mu_s,
                market=experiment.market.model_copy(update={"mu_s": mu_s}),
                v0=experiment.forecast.v0,
                threads=threads,
                keep_policies=keep_policies,
            )
        )
    sweep_market: MarketParams = experiment.market.model_copy(
        update={"mu_s": experiment.sweep_mu_s}
    )
    for v0 in experiment.v0_levels:
        points.append(
            run_point(
                experiment=experiment,
                sweep="v0",
                value=v0,
                market=sweep_market,
                v0=v0,
                threads=threads,
                keep_policies=keep_policies,
            )
        )
    return ComparisonResult(points=points)
