"""Unit tests for special functions, quadrature, regression and optimization."""

import math

import numpy as np
import pytest
from scipy import special

from domain.errors import ConvergenceError, ForecastInputError
from domain.numerics import (
    ASYMPTOTIC_ORDER,
    OptimizerConfig,
    adaptive_quad,
    bessel_k,
    log_bessel_k,
    log_gamma,
    minimize,
    ols_fit,
)


def test_bessel_half_order_closed_form() -> None:
    """K_{1/2}(x) = √(π/2x)·e^{−x}, scaled and unscaled."""
    x = 1.3
    expected: float = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x)
    assert bessel_k(0.5, x) == pytest.approx(expected, rel=1e-12)
    assert bessel_k(0.5, x, scaled=True) == pytest.approx(expected * math.exp(x), rel=1e-12)

    values = bessel_k(0.5, np.array([0.5, 2.0]))
    assert isinstance(values, np.ndarray)
    assert values.shape == (2,)

    print("✓ Half-order Bessel function matches closed form")


def test_log_bessel_large_order_matches_scaled_bessel() -> None:
    """The uniform expansion agrees with log kve where both are finite."""
    order: float = ASYMPTOTIC_ORDER + 10.0
    x = np.array([5.0, 30.0, 200.0])
    reference = np.log(special.kve(order, x)) - x
    assert np.all(np.isfinite(reference))
    np.testing.assert_allclose(log_bessel_k(order, x), reference, rtol=1e-9, atol=1e-8)

    print("✓ Large-order log Bessel expansion accurate")


def test_log_bessel_small_argument_stays_finite() -> None:
    """Where K overflows, the small-argument leading term is used."""
    x = 1e-300
    value = log_bessel_k(2.0, x)
    expected: float = math.lgamma(2.0) + 2.0 * math.log(2.0 / x) - math.log(2.0)
    assert math.isfinite(value)
    assert value == pytest.approx(expected, rel=1e-10)
    assert log_bessel_k(1.0, 2.0) == pytest.approx(math.log(special.kv(1.0, 2.0)), rel=1e-12)

    print("✓ Small-argument log Bessel finite")


def test_special_function_domain_errors() -> None:
    """Negative orders and non-positive arguments are input errors."""
    with pytest.raises(ForecastInputError):
        bessel_k(-1.0, 1.0)
    with pytest.raises(ForecastInputError):
        log_bessel_k(1.0, 0.0)
    with pytest.raises(ForecastInputError):
        log_gamma(0.0)
    assert log_gamma(5.0) == pytest.approx(math.log(24.0), rel=1e-14)

    print("✓ Domain errors raised")


def test_adaptive_quad_gaussian_integral() -> None:
    """∫ e^{−x²} over the real line is √π."""
    result = adaptive_quad(lambda x: math.exp(-x * x), -math.inf, math.inf, tol=1e-10)
    assert result.value == pytest.approx(math.sqrt(math.pi), abs=1e-9)
    assert result.abserr <= 1e-10
    assert adaptive_quad(math.exp, 2.0, 2.0).value == 0.0

    with pytest.raises(ForecastInputError):
        adaptive_quad(math.exp, 0.0, 1.0, tol=0.0)

    print("✓ Quadrature accurate")


def test_adaptive_quad_divergent_integral_raises() -> None:
    """A divergent integral reports a convergence failure."""
    with pytest.raises(ConvergenceError):
        adaptive_quad(lambda x: 1.0 / x, 0.0, 1.0)

    print("✓ Divergent quadrature raises ConvergenceError")


def test_ols_fit_recovers_line() -> None:
    """Exact data give back intercept and slope."""
    xs = np.linspace(0.0, 5.0, 11)
    intercept, slope = ols_fit(xs=xs, ys=0.7 - 1.5 * xs)
    assert intercept == pytest.approx(0.7, abs=1e-12)
    assert slope == pytest.approx(-1.5, abs=1e-12)

    with pytest.raises(ForecastInputError):
        ols_fit(xs=[1.0, 1.0, 1.0], ys=[0.0, 1.0, 2.0])
    with pytest.raises(ForecastInputError):
        ols_fit(xs=[1.0, 2.0], ys=[0.0])

    print("✓ OLS fit correct")


def test_minimize_quadratic_bowl() -> None:
    """Multi-start simplex finds the minimum of a shifted bowl."""
    outcome = minimize(
        lambda p: (p[0] - 1.0) ** 2 + 3.0 * (p[1] + 2.0) ** 2,
        x0=[0.0, 0.0],
        config=OptimizerConfig(restarts=2, tolerance=1e-10),
    )
    assert outcome.argmin[0] == pytest.approx(1.0, abs=1e-4)
    assert outcome.argmin[1] == pytest.approx(-2.0, abs=1e-4)
    assert outcome.value < 1e-8
    assert outcome.n_evaluations > 0

    print("✓ Minimizer converges")


def test_minimize_non_finite_everywhere_raises() -> None:
    """An objective that is never finite cannot be minimized."""
    with pytest.raises(ConvergenceError):
        minimize(lambda p: math.nan, x0=[0.0], config=OptimizerConfig(restarts=1))

    print("✓ Non-finite objective raises ConvergenceError")


if __name__ == "__main__":
    print("Running numerics tests...\n")
    test_bessel_half_order_closed_form()
    test_log_bessel_large_order_matches_scaled_bessel()
    test_log_bessel_small_argument_stays_finite()
    test_special_function_domain_errors()
    test_adaptive_quad_gaussian_integral()
    test_adaptive_quad_divergent_integral_raises()
    test_ols_fit_recovers_line()
    test_minimize_quadratic_bowl()
    test_minimize_non_finite_everywhere_raises()
    print("\n✅ All numerics tests passed!")
