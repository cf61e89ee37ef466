"""Forecast dynamics of the four families: simulation and predictive laws.

Every family is driven by a pair (m, V) evolving in the time-changed clock
θ_t = ∫₀ᵗ ρ²(T−s) ds. StudentT and LogGh carry a geometric factor V, Nig and
LogNig a square-root factor absorbed at zero. The conditional law of m_T
given (m, V) is available in closed form; CDFs and quantiles are numerical.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from domain.errors import ConvergenceError, ForecastInputError
from domain.models import (
    ForecastState,
    ModelFamily,
    ModelParams,
    NigCanonical,
    PathSet,
    PredictiveMoments,
    RhoSchedule,
)
from domain.numerics import DEFAULT_QUAD_TOL, adaptive_quad, log_bessel_k, log_gamma
from domain.streams import map_blocks

logger = logging.getLogger(__name__)

DEFAULT_SUBSTEPS: int = 100

# Split points for density integration, in units of the law's scale.
SPLIT_WIDTHS: tuple[float, ...] = (0.01, 0.1, 1.0, 3.0, 10.0, 30.0, 100.0)


# Time change and one-step dynamics
def time_change(rho: RhoSchedule, T: float, t: float) -> float:
    """
    θ_t = ∫₀ᵗ ρ²(T−s) ds, exact for a piecewise-constant schedule.

    Args:
        rho: Rate schedule over lead time
        T: Delivery time (hours)
        t: Current time (hours), 0 ≤ t ≤ T

    Returns:
        Elapsed time-changed clock
    """
    if t < 0.0 or t > T:
        raise ForecastInputError(f"Time {t} outside [0, {T}]")
    return rho.integral(lower=T - t, upper=T)


def theta_increment(rho: RhoSchedule, T: float, t0: float, t1: float) -> float:
    """θ_{t1} − θ_{t0} computed without cancellation."""
    if not 0.0 <= t0 <= t1 <= T:
        raise ForecastInputError(f"Need 0 ≤ {t0} ≤ {t1} ≤ {T}")
    return rho.integral(lower=T - t1, upper=T - t0)


def _mean_reversion(family: ModelFamily, b: float) -> float:
    if family == ModelFamily.NIG:
        return 1.0
    return 1.0 + 0.5 * b * b


def advance_state(
    family: ModelFamily,
    b: float,
    m: NDArray[np.float64],
    V: NDArray[np.float64],
    dtheta: float,
    z_mean: NDArray[np.float64],
    z_var: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    One sub-step of length dtheta in the time-changed clock.

    The geometric factor is advanced exactly; the square-root factor by
    full-truncation Euler with absorption at zero. m uses the factor at the
    start of the step: additive Euler for symmetric families, log-Euler for
    positive ones, both exact martingales.

    Args:
        family: Model family
        b: Shape parameter
        m: Current means
        V: Current uncertainty factors
        dtheta: Clock increment (≥ 0)
        z_mean: Standard normals driving m
        z_var: Independent standard normals driving V

    Returns:
        (m, V) after the step
    """
    if dtheta < 0.0:
        raise ForecastInputError(f"Clock increment must be non-negative, got {dtheta}")
    if dtheta == 0.0:
        return m.copy(), V.copy()

    v_pos: NDArray[np.float64] = np.maximum(V, 0.0)
    root_h: float = math.sqrt(dtheta)

    if family.has_square_root_factor:
        kappa: float = _mean_reversion(family=family, b=b)
        stepped: NDArray[np.float64] = (
            V - kappa * v_pos * dtheta + b * np.sqrt(v_pos) * root_h * z_var
        )
        v_next: NDArray[np.float64] = np.where(V > 0.0, np.maximum(stepped, 0.0), 0.0)
    else:
        v_next = V * np.exp(-(1.0 + 0.5 * b * b) * dtheta + b * root_h * z_var)

    diffusion: NDArray[np.float64] = np.sqrt(v_pos * dtheta)
    if family.is_positive:
        m_next: NDArray[np.float64] = m * np.exp(-0.5 * v_pos * dtheta + diffusion * z_mean)
    else:
        m_next = m + diffusion * z_mean
    return m_next, v_next


def _check_state(family: ModelFamily, m: ArrayLike, V: ArrayLike) -> None:
    if np.any(np.asarray(V) < 0.0):
        raise ForecastInputError("Uncertainty factor V must be non-negative")
    if family.is_positive and np.any(np.asarray(m) <= 0.0):
        raise ForecastInputError(f"{family.value} requires a positive mean m")


def substep_increments(
    params: ModelParams, t0: float, t1: float, substeps: int
) -> list[float]:
    """Clock increments of `substeps` equal real-time steps from t0 to t1."""
    if t1 == t0:
        return []
    edges: NDArray[np.float64] = np.linspace(t0, t1, substeps + 1)
    return [
        theta_increment(rho=params.rho, T=params.delivery_time, t0=a, t1=b)
        for a, b in zip(edges[:-1], edges[1:])
    ]


def simulate_paths(
    params: ModelParams,
    initial: ForecastState,
    grid: Sequence[float],
    n_paths: int,
    substeps: int = DEFAULT_SUBSTEPS,
    seed: int = 0,
    threads: int = 1,
) -> PathSet:
    """
    Simulate joint (m, V) trajectories observed on `grid`.

    Args:
        params: Family, shape and rate schedule
        initial: Starting state; its t is the simulation start
        grid: Observation times in [initial.t, T), increasing
        n_paths: Number of trajectories
        substeps: Euler sub-steps between consecutive observation times
        seed: Root seed of the block streams
        threads: Worker threads (does not change the result)

    Returns:
        PathSet with arrays of shape (n_paths, len(grid))
    """
    times: list[float] = [float(g) for g in grid]
    if not times:
        raise ForecastInputError("Observation grid is empty")
    if times[0] < initial.t or times[-1] >= params.delivery_time:
        raise ForecastInputError(
            f"Grid must lie in [{initial.t}, {params.delivery_time}), got {times}"
        )
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ForecastInputError(f"Grid must be strictly increasing, got {times}")
    if n_paths < 1 or substeps < 1:
        raise ForecastInputError("Need n_paths ≥ 1 and substeps ≥ 1")
    _check_state(family=params.family, m=initial.m, V=initial.V)

    starts: list[float] = [initial.t, *times[:-1]]
    increments: list[list[float]] = [
        substep_increments(params=params, t0=a, t1=b, substeps=substeps)
        for a, b in zip(starts, times)
    ]

    def run_block(
        start: int, stop: int, rng: np.random.Generator
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        n: int = stop - start
        m: NDArray[np.float64] = np.full(n, initial.m)
        V: NDArray[np.float64] = np.full(n, initial.V)
        out_m: NDArray[np.float64] = np.empty((n, len(times)))
        out_v: NDArray[np.float64] = np.empty((n, len(times)))
        for k, steps in enumerate(increments):
            for dtheta in steps:
                z_mean = rng.standard_normal(n)
                z_var = rng.standard_normal(n)
                m, V = advance_state(
                    family=params.family,
                    b=params.b,
                    m=m,
                    V=V,
                    dtheta=dtheta,
                    z_mean=z_mean,
                    z_var=z_var,
                )
            out_m[:, k] = m
            out_v[:, k] = V
        return out_m, out_v

    blocks = map_blocks(fn=run_block, n=n_paths, seed=seed, threads=threads)
    logger.debug(
        "simulated %d %s paths on %d grid points", n_paths, params.family.value, len(times)
    )
    return PathSet(
        family=params.family,
        time_grid=times,
        m=np.concatenate([blk[0] for blk in blocks]),
        V=np.concatenate([blk[1] for blk in blocks]),
        seed=seed,
    )


# Exact terminal draws
def draw_terminal(
    family: ModelFamily,
    b: float,
    m: ArrayLike,
    V: ArrayLike,
    rng: np.random.Generator,
    normal: Optional[NDArray[np.float64]] = None,
) -> NDArray[np.float64]:
    """
    Exact draws of m_T given (m, V), one per entry of the broadcast inputs.

    m_T is a Gaussian variance mixture: the integrated factor I is inverse
    Gaussian for the square-root families and 2V/(b²·Gamma(ν)) for the
    geometric ones; m_T = m + √I·N or m·exp(−I/2 + √I·N).

    Args:
        family: Model family
        b: Shape parameter
        m: Conditional means
        V: Uncertainty factors (V = 0 gives the point mass at m)
        rng: Generator for the mixing variable (and N when not supplied)
        normal: Optional Gaussian component N, for correlated constructions
    """
    m_arr, v_arr = np.broadcast_arrays(
        np.asarray(m, dtype=np.float64), np.asarray(V, dtype=np.float64)
    )
    _check_state(family=family, m=m_arr, V=v_arr)
    z: NDArray[np.float64] = (
        rng.standard_normal(m_arr.shape) if normal is None else np.asarray(normal)
    )
    out: NDArray[np.float64] = m_arr.astype(np.float64, copy=True)
    live: NDArray[np.bool_] = v_arr > 0.0
    if not np.any(live):
        return out

    v_live: NDArray[np.float64] = v_arr[live]
    if family.has_square_root_factor:
        kappa: float = _mean_reversion(family=family, b=b)
        integrated: NDArray[np.float64] = rng.wald(v_live / kappa, (v_live / b) ** 2)
    else:
        nu: float = 1.0 + 2.0 / (b * b)
        integrated = 2.0 * v_live / (b * b * rng.gamma(shape=nu, size=v_live.size))

    shock: NDArray[np.float64] = np.sqrt(integrated) * z[live]
    if family.is_positive:
        out[live] = m_arr[live] * np.exp(shock - 0.5 * integrated)
    else:
        out[live] = m_arr[live] + shock
    return out


def sample_terminal(
    params: ModelParams,
    state: ForecastState,
    n: int,
    seed: int = 0,
    threads: int = 1,
) -> NDArray[np.float64]:
    """n exact draws of m_T from the predictive law at `state`."""
    _check_state(family=params.family, m=state.m, V=state.V)

    def run_block(start: int, stop: int, rng: np.random.Generator) -> NDArray[np.float64]:
        return draw_terminal(
            family=params.family,
            b=params.b,
            m=np.full(stop - start, state.m),
            V=np.full(stop - start, state.V),
            rng=rng,
        )

    return np.concatenate(map_blocks(fn=run_block, n=n, seed=seed, threads=threads))


# Canonical parameters, characteristic function, moments
def factor_from_variance(
    family: ModelFamily, m: ArrayLike, sigma2: ArrayLike
) -> NDArray[np.float64]:
    """V implied by predictive variance σ²: σ² itself, or log(σ²/m² + 1)."""
    s2: NDArray[np.float64] = np.asarray(sigma2, dtype=np.float64)
    if family.is_positive:
        mean: NDArray[np.float64] = np.asarray(m, dtype=np.float64)
        return np.log1p(s2 / (mean * mean))
    return s2


def variance_from_factor(
    family: ModelFamily, m: ArrayLike, V: ArrayLike
) -> NDArray[np.float64]:
    """Inverse of factor_from_variance."""
    v: NDArray[np.float64] = np.asarray(V, dtype=np.float64)
    if family.is_positive:
        mean: NDArray[np.float64] = np.asarray(m, dtype=np.float64)
        return mean * mean * np.expm1(v)
    return v


def canonical_nig_params(
    family: ModelFamily,
    m: float,
    b: float,
    V: Optional[float] = None,
    sigma2: Optional[float] = None,
) -> NigCanonical:
    """
    Canonical parameters of the Nig law of m_T, or of log m_T for LogNig.

    Exactly one of V and sigma2 must be given; for LogNig sigma2 is mapped to
    V = log(σ²/m² + 1).
    """
    if family not in (ModelFamily.NIG, ModelFamily.LOG_NIG):
        raise ForecastInputError(f"No NIG parameterization for {family.value}")
    if (V is None) == (sigma2 is None):
        raise ForecastInputError("Give exactly one of V and sigma2")
    if b <= 0.0:
        raise ForecastInputError(f"Shape b must be positive, got {b}")

    if family == ModelFamily.NIG:
        factor: float = float(V if V is not None else sigma2)
        if factor < 0.0:
            raise ForecastInputError("Variance must be non-negative")
        return NigCanonical(alpha=1.0 / b, beta=0.0, gamma=1.0 / b, delta=factor / b, mu=m)

    if m <= 0.0:
        raise ForecastInputError(f"LogNig requires m > 0, got {m}")
    factor = float(V) if V is not None else math.log1p(float(sigma2) / (m * m))
    if factor < 0.0:
        raise ForecastInputError("Variance must be non-negative")
    gamma: float = 1.0 / b + 0.5 * b
    return NigCanonical(
        alpha=math.sqrt(gamma * gamma + 0.25),
        beta=-0.5,
        gamma=gamma,
        delta=factor / b,
        mu=math.log(m),
    )


def char_fn(canonical: NigCanonical, u: ArrayLike) -> complex | NDArray[np.complex128]:
    """E[exp(iuX)] = exp(iμu + δ(γ − √(α² − (β+iu)²)))."""
    arg: NDArray[np.float64] = np.asarray(u, dtype=np.float64)
    root = np.sqrt(canonical.alpha**2 - (canonical.beta + 1j * arg) ** 2)
    value = np.exp(1j * canonical.mu * arg + canonical.delta * (canonical.gamma - root))
    if np.ndim(u) == 0:
        return complex(value)
    return value


def predictive_moments(params: ModelParams, state: ForecastState) -> PredictiveMoments:
    """Mean and variance of m_T; LogGh has no second moment."""
    _check_state(family=params.family, m=state.m, V=state.V)
    if params.family == ModelFamily.LOG_GH:
        variance: float = 0.0 if state.V == 0.0 else math.inf
    else:
        variance = float(variance_from_factor(family=params.family, m=state.m, V=state.V))
    return PredictiveMoments(mean=state.m, variance=variance)


# Densities
def _nig_logpdf(
    x: NDArray[np.float64],
    alpha: float,
    beta: float,
    gamma: float,
    delta: NDArray[np.float64],
    mu: NDArray[np.float64],
) -> NDArray[np.float64]:
    dev: NDArray[np.float64] = x - mu
    r: NDArray[np.float64] = np.hypot(delta, dev)
    return (
        math.log(alpha)
        + np.log(delta)
        - math.log(math.pi)
        + log_bessel_k(1.0, alpha * r)
        - np.log(r)
        + delta * gamma
        + beta * dev
    )


def natural_logpdf(
    family: ModelFamily,
    b: float,
    m: ArrayLike,
    V: ArrayLike,
    y: ArrayLike,
) -> NDArray[np.float64]:
    """
    Log density in the family's natural variable: m_T itself for StudentT and
    Nig, log m_T for LogGh and LogNig. Inputs broadcast; V must be positive.
    """
    y_arr: NDArray[np.float64] = np.asarray(y, dtype=np.float64)
    m_arr: NDArray[np.float64] = np.asarray(m, dtype=np.float64)
    v_arr: NDArray[np.float64] = np.asarray(V, dtype=np.float64)

    if family == ModelFamily.NIG:
        return _nig_logpdf(
            x=y_arr, alpha=1.0 / b, beta=0.0, gamma=1.0 / b, delta=v_arr / b, mu=m_arr
        )

    if family == ModelFamily.LOG_NIG:
        gamma: float = 1.0 / b + 0.5 * b
        return _nig_logpdf(
            x=y_arr,
            alpha=math.sqrt(gamma * gamma + 0.25),
            beta=-0.5,
            gamma=gamma,
            delta=v_arr / b,
            mu=np.log(m_arr),
        )

    nu: float = 1.0 + 2.0 / (b * b)
    if family == ModelFamily.STUDENT_T:
        dev: NDArray[np.float64] = y_arr - m_arr
        return (
            log_gamma(nu + 0.5)
            - log_gamma(nu)
            + math.log(b / 2.0)
            - 0.5 * np.log(math.pi * v_arr)
            - (nu + 0.5) * np.log1p(dev * dev * b * b / (4.0 * v_arr))
        )

    # LogGh: generalized hyperbolic law of log m_T with order ν + 1/2.
    z: NDArray[np.float64] = y_arr - np.log(m_arr)
    order: float = nu + 0.5
    return (
        -0.5 * z
        + math.log(b)
        - log_gamma(nu)
        - 0.5 * np.log(math.pi * v_arr)
        + order * (np.log(v_arr) - math.log(b) - 0.5 * np.log(4.0 * v_arr + z * z * b * b))
        + log_bessel_k(order, np.sqrt(v_arr / (b * b) + 0.25 * z * z))
    )


def log_predictive_density(
    family: ModelFamily,
    b: float,
    m: ArrayLike,
    V: ArrayLike,
    x: ArrayLike,
) -> NDArray[np.float64]:
    """Vectorized log density of m_T; −inf outside the support."""
    x_arr: NDArray[np.float64] = np.asarray(x, dtype=np.float64)
    if np.any(np.asarray(V) <= 0.0):
        raise ForecastInputError("Density undefined for V ≤ 0 (point mass)")
    _check_state(family=family, m=m, V=V)
    if not family.is_positive:
        return natural_logpdf(family=family, b=b, m=m, V=V, y=x_arr)

    inside: NDArray[np.bool_] = x_arr > 0.0
    y: NDArray[np.float64] = np.log(np.where(inside, x_arr, 1.0))
    logp: NDArray[np.float64] = natural_logpdf(family=family, b=b, m=m, V=V, y=y) - y
    return np.where(inside, logp, -np.inf)


def predictive_density(
    params: ModelParams, state: ForecastState, x: ArrayLike
) -> float | NDArray[np.float64]:
    """
    Density of m_T at x given the state.

    Raises:
        ForecastInputError: for V = 0 (the law is a point mass) or an
            invalid state
    """
    values: NDArray[np.float64] = np.exp(
        log_predictive_density(
            family=params.family, b=params.b, m=state.m, V=state.V, x=x
        )
    )
    if np.ndim(x) == 0:
        return float(values)
    return values


# CDF, quantiles, bands
def _natural_location(params: ModelParams, state: ForecastState) -> tuple[float, float]:
    """Approximate centre and scale of the natural variable."""
    scale: float = math.sqrt(state.V)
    if params.family.is_positive:
        return math.log(state.m) - 0.5 * state.V, scale
    return state.m, scale


def _integrate_natural(
    params: ModelParams,
    state: ForecastState,
    lower: float,
    upper: float,
    tol: float,
) -> float:
    """Mass of the natural variable on (lower, upper), split around the centre."""
    if upper <= lower:
        return 0.0
    center, scale = _natural_location(params=params, state=state)
    cuts: set[float] = {center}
    for width in SPLIT_WIDTHS:
        cuts.update((center - width * scale, center + width * scale))
    edges: list[float] = [lower, *sorted(c for c in cuts if lower < c < upper), upper]

    def integrand(y: float) -> float:
        return math.exp(
            float(
                natural_logpdf(
                    family=params.family, b=params.b, m=state.m, V=state.V, y=y
                )
            )
        )

    piece_tol: float = tol / (len(edges) - 1)
    total: float = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += adaptive_quad(f=integrand, a=a, b=b, tol=piece_tol).value
    return total


def _natural_cdf(params: ModelParams, state: ForecastState, y: float, tol: float) -> float:
    if params.family.is_symmetric:
        if y >= state.m:
            value: float = 0.5 + _integrate_natural(params, state, state.m, y, tol)
        else:
            value = 0.5 - _integrate_natural(params, state, y, state.m, tol)
    else:
        center, _ = _natural_location(params=params, state=state)
        if y <= center:
            value = _integrate_natural(params, state, -math.inf, y, tol)
        else:
            value = 1.0 - _integrate_natural(params, state, y, math.inf, tol)
    return min(max(value, 0.0), 1.0)


def predictive_mass(
    params: ModelParams,
    state: ForecastState,
    lower: float,
    upper: float,
    tol: float = DEFAULT_QUAD_TOL,
) -> float:
    """P(lower < m_T ≤ upper) by quadrature of the density."""
    _check_state(family=params.family, m=state.m, V=state.V)
    if state.V == 0.0:
        return 1.0 if lower < state.m <= upper else 0.0
    if params.family.is_positive:
        lower = math.log(lower) if lower > 0.0 else -math.inf
        if upper <= 0.0:
            return 0.0
        upper = math.log(upper)
    return _integrate_natural(params=params, state=state, lower=lower, upper=upper, tol=tol)


def predictive_cdf(
    params: ModelParams,
    state: ForecastState,
    x: float,
    tol: float = DEFAULT_QUAD_TOL,
) -> float:
    """
    P(m_T ≤ x) by adaptive quadrature of the density.

    Symmetric families integrate outward from m; the positive families work
    with log m_T and integrate whichever tail is nearer. V = 0 gives the step
    function at m.
    """
    if tol <= 0.0:
        raise ForecastInputError(f"Tolerance must be positive, got {tol}")
    _check_state(family=params.family, m=state.m, V=state.V)
    if state.V == 0.0:
        return 1.0 if x >= state.m else 0.0
    if params.family.is_positive:
        if x <= 0.0:
            return 0.0
        return _natural_cdf(params=params, state=state, y=math.log(x), tol=tol)
    return _natural_cdf(params=params, state=state, y=x, tol=tol)


def predictive_quantile(
    params: ModelParams,
    state: ForecastState,
    p: float,
    tol: float = DEFAULT_QUAD_TOL,
) -> float:
    """Quantile of m_T at probability p by root-finding on the CDF."""
    if not 0.0 < p < 1.0:
        raise ForecastInputError(f"Probability must lie in (0, 1), got {p}")
    _check_state(family=params.family, m=state.m, V=state.V)
    if state.V == 0.0:
        return state.m

    center, scale = _natural_location(params=params, state=state)

    def gap(y: float) -> float:
        return _natural_cdf(params=params, state=state, y=y, tol=tol) - p

    lo: float = center - scale
    hi: float = center + scale
    for _ in range(60):
        if gap(lo) < 0.0:
            break
        lo = center - 2.0 * (center - lo)
    else:
        raise ConvergenceError(f"Could not bracket the {p}-quantile from below")
    for _ in range(60):
        if gap(hi) > 0.0:
            break
        hi = center + 2.0 * (hi - center)
    else:
        raise ConvergenceError(f"Could not bracket the {p}-quantile from above")

    root: float = optimize.brentq(gap, lo, hi, xtol=1e-10 * max(scale, 1e-12), rtol=1e-12)
    return math.exp(root) if params.family.is_positive else root


def quantile_bands(
    params: ModelParams,
    paths: PathSet,
    levels: Sequence[float] = (0.5, 0.9),
    path_ids: Optional[Sequence[int]] = None,
    tol: float = 1e-7,
) -> pd.DataFrame:
    """
    Central predictive intervals along selected trajectories.

    Columns: path_id, time, m, V, then lower_<pct>/upper_<pct> per level.
    """
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ForecastInputError(f"Band level must lie in (0, 1), got {level}")
    ids: list[int] = list(path_ids) if path_ids is not None else [0]

    rows: list[dict[str, float]] = []
    for path_id in ids:
        for k, t in enumerate(paths.time_grid):
            state: ForecastState = paths.state(path_id=path_id, time_index=k)
            row: dict[str, float] = {"path_id": path_id, "time": t, "m": state.m, "V": state.V}
            for level in sorted(levels):
                pct: int = int(round(100 * level))
                row[f"lower_{pct}"] = predictive_quantile(params, state, 0.5 * (1 - level), tol)
                row[f"upper_{pct}"] = predictive_quantile(params, state, 0.5 * (1 + level), tol)
            rows.append(row)
    return pd.DataFrame(rows)
