"""Special functions, quadrature, regression and derivative-free optimization.

Everything here is a thin, validated layer over scipy so that the forecast
models, the calibration and the scoring code share one set of conventions
for domain errors and convergence failures.
"""

import logging
import math
from typing import Callable, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, optimize, special, stats

from domain.errors import ConvergenceError, ForecastInputError

logger = logging.getLogger(__name__)

DEFAULT_QUAD_TOL: float = 1e-8
QUAD_SUBINTERVALS: int = 400

# Above this order kve overflows long before the densities become negligible.
ASYMPTOTIC_ORDER: float = 50.0

FloatOrArray = Union[float, NDArray[np.float64]]


class OptimizerConfig(BaseModel):
    """Budget and determinism knobs for the multi-start simplex search."""

    model_config = ConfigDict(frozen=True)

    max_iterations: int = Field(default=2000, ge=1)
    tolerance: float = Field(default=1e-8, gt=0.0)
    restarts: int = Field(default=3, ge=1)
    seed: int = 0


class QuadResult(BaseModel):
    """Quadrature estimate with its reported absolute error."""

    value: float
    abserr: float = Field(..., ge=0.0)


class OptimizeOutcome(BaseModel):
    """Best point found over all starts."""

    argmin: list[float]
    value: float
    n_evaluations: int = Field(default=0, ge=0)
    n_iterations: int = Field(default=0, ge=0)


def _as_positive_array(x: ArrayLike, name: str) -> NDArray[np.float64]:
    arr: NDArray[np.float64] = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0.0)):
        raise ForecastInputError(f"{name} must be strictly positive, got {x!r}")
    return arr


def _unwrap(arr: NDArray[np.float64], like: ArrayLike) -> FloatOrArray:
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def bessel_k(order: float, x: ArrayLike, scaled: bool = False) -> FloatOrArray:
    """
    Modified Bessel function of the third kind K_order(x).

    Args:
        order: Non-negative order
        x: Positive argument (scalar or array)
        scaled: Return e^x K_order(x) instead, which stays finite for large x

    Returns:
        K_order(x) or its exponentially scaled variant
    """
    if order < 0.0:
        raise ForecastInputError(f"Bessel order must be non-negative, got {order}")
    arr: NDArray[np.float64] = _as_positive_array(x=x, name="Bessel argument")
    values: NDArray[np.float64] = (
        special.kve(order, arr) if scaled else special.kv(order, arr)
    )
    return _unwrap(arr=np.asarray(values, dtype=np.float64), like=x)


def _log_bessel_k_uniform(order: float, x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Large-order uniform expansion of log K_order(x), four correction terms."""
    nu: float = float(order)
    z: NDArray[np.float64] = x / nu
    root: NDArray[np.float64] = np.sqrt(1.0 + z * z)
    eta: NDArray[np.float64] = root + np.log(z / (1.0 + root))
    p: NDArray[np.float64] = 1.0 / root
    p2: NDArray[np.float64] = p * p
    u1 = p * (3.0 - 5.0 * p2) / 24.0
    u2 = p2 * (81.0 - 462.0 * p2 + 385.0 * p2**2) / 1152.0
    u3 = (
        p
        * p2
        * (30375.0 - 369603.0 * p2 + 765765.0 * p2**2 - 425425.0 * p2**3)
        / 414720.0
    )
    u4 = (
        p2**2
        * (
            4465125.0
            - 94121676.0 * p2
            + 349922430.0 * p2**2
            - 446185740.0 * p2**3
            + 185910725.0 * p2**4
        )
        / 39813120.0
    )
    series = 1.0 - u1 / nu + u2 / nu**2 - u3 / nu**3 + u4 / nu**4
    return (
        0.5 * math.log(math.pi / (2.0 * nu))
        - nu * eta
        - 0.5 * np.log(root)
        + np.log(series)
    )


def _log_bessel_k_small_argument(
    order: float, x: NDArray[np.float64]
) -> NDArray[np.float64]:
    if order == 0.0:
        return np.log(-np.log(x / 2.0) - np.euler_gamma)
    return special.gammaln(order) + order * np.log(2.0 / x) - math.log(2.0)


def log_bessel_k(order: float, x: ArrayLike) -> FloatOrArray:
    """
    Natural log of K_order(x), finite wherever K_order(x) is positive.

    The exponentially scaled Bessel function covers moderate orders; the
    uniform large-order expansion takes over where kve overflows, which is
    the regime of the log-GH density at small shape parameters.
    """
    if order < 0.0:
        raise ForecastInputError(f"Bessel order must be non-negative, got {order}")
    arr: NDArray[np.float64] = _as_positive_array(x=x, name="Bessel argument")
    flat: NDArray[np.float64] = np.atleast_1d(arr)
    if order >= ASYMPTOTIC_ORDER:
        out: NDArray[np.float64] = _log_bessel_k_uniform(order=order, x=flat)
    else:
        with np.errstate(divide="ignore", over="ignore"):
            out = np.log(special.kve(order, flat)) - flat
        bad: NDArray[np.bool_] = ~np.isfinite(out)
        if np.any(bad):
            out[bad] = _log_bessel_k_small_argument(order=order, x=flat[bad])
    return _unwrap(arr=out.reshape(arr.shape), like=x)


def log_gamma(x: ArrayLike) -> FloatOrArray:
    """Natural log of the gamma function for positive arguments."""
    arr: NDArray[np.float64] = _as_positive_array(x=x, name="Gamma argument")
    return _unwrap(arr=np.asarray(special.gammaln(arr), dtype=np.float64), like=x)


def adaptive_quad(
    f: Callable[[float], float],
    a: float,
    b: float,
    tol: float = DEFAULT_QUAD_TOL,
) -> QuadResult:
    """
    Integrate f over (a, b) to an absolute tolerance.

    Infinite limits are accepted and handled by scipy's variable transform.

    Raises:
        ConvergenceError: when the subdivision budget is exhausted with the
            reported error above tol; the best estimate is attached
    """
    if tol <= 0.0:
        raise ForecastInputError(f"Quadrature tolerance must be positive, got {tol}")
    if a == b:
        return QuadResult(value=0.0, abserr=0.0)

    result = integrate.quad(
        f, a, b, epsabs=tol, epsrel=0.0, limit=QUAD_SUBINTERVALS, full_output=1
    )
    value: float = float(result[0])
    abserr: float = float(result[1])
    if not math.isfinite(value):
        raise ConvergenceError(
            f"Quadrature on ({a}, {b}) produced a non-finite value",
            best_estimate=value,
            abserr=abserr,
        )
    if len(result) > 3 and abserr > tol:
        raise ConvergenceError(
            f"Quadrature on ({a}, {b}) did not converge: {result[3]}",
            best_estimate=value,
            abserr=abserr,
        )
    return QuadResult(value=value, abserr=abserr)


def ols_fit(
    xs: Sequence[float] | ArrayLike, ys: Sequence[float] | ArrayLike
) -> tuple[float, float]:
    """
    Least-squares affine fit y ≈ intercept + slope·x.

    Returns:
        (intercept, slope)
    """
    x: NDArray[np.float64] = np.asarray(xs, dtype=np.float64).ravel()
    y: NDArray[np.float64] = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ForecastInputError(
            f"Regression inputs differ in length: {x.size} vs {y.size}"
        )
    if x.size < 2 or np.ptp(x) == 0.0:
        raise ForecastInputError("Degenerate regression design: need two distinct x")

    fit = stats.linregress(x=x, y=y)
    return float(fit.intercept), float(fit.slope)


def minimize(
    objective: Callable[[NDArray[np.float64]], float],
    x0: ArrayLike,
    config: OptimizerConfig = OptimizerConfig(),
) -> OptimizeOutcome:
    """
    Multi-start Nelder-Mead minimization.

    The first start is x0; the remaining ones are seeded perturbations of x0.
    Non-finite objective values are treated as +inf so the simplex retreats
    from them.

    Raises:
        ConvergenceError: if no trial point produced a finite objective
    """
    start: NDArray[np.float64] = np.atleast_1d(np.asarray(x0, dtype=np.float64))

    def guarded(x: NDArray[np.float64]) -> float:
        value: float = float(objective(x))
        return value if math.isfinite(value) else math.inf

    rng: np.random.Generator = np.random.default_rng(config.seed)
    starts: list[NDArray[np.float64]] = [start]
    for _ in range(config.restarts - 1):
        spread: NDArray[np.float64] = 0.5 * np.maximum(np.abs(start), 1.0)
        starts.append(start + rng.normal(scale=spread))

    best_x: NDArray[np.float64] = start
    best_value: float = guarded(start)
    evaluations: int = 1
    iterations: int = 0
    for index, point in enumerate(starts):
        result = optimize.minimize(
            guarded,
            point,
            method="Nelder-Mead",
            options={
                "maxiter": config.max_iterations,
                "maxfev": 4 * config.max_iterations,
                "xatol": config.tolerance,
                "fatol": config.tolerance,
                "adaptive": start.size > 2,
            },
        )
        evaluations += int(result.nfev)
        iterations += int(result.nit)
        logger.debug(
            "start %d: value=%.10g nit=%d success=%s", index, result.fun, result.nit,
            result.success,
        )
        if float(result.fun) < best_value:
            best_value = float(result.fun)
            best_x = np.asarray(result.x, dtype=np.float64)

    if not math.isfinite(best_value):
        raise ConvergenceError("Objective was non-finite at every trial point")

    return OptimizeOutcome(
        argmin=[float(v) for v in best_x],
        value=best_value,
        n_evaluations=evaluations,
        n_iterations=iterations,
    )
