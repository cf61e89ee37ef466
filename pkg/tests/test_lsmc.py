"""Unit tests for adaptive cell regression and backward induction."""

import numpy as np
import pytest
from numpy.typing import NDArray

from domain.errors import ForecastInputError
from domain.lsmc import (
    LocalRegressor,
    PolicyTable,
    StagePolicy,
    build_partition,
    evaluate_fit,
    regress_local,
    solve_backward,
)
from domain.models import LsmcConfig


class AffineProblem:
    """Factors affine in a scalar state: terminal 1 + φ·s, stage exp(0.1·φ·s)."""

    def __init__(self, states: list[NDArray[np.float64]]) -> None:
        self._states = states

    @property
    def n_stages(self) -> int:
        return len(self._states)

    def states(self, stage: int) -> NDArray[np.float64]:
        return self._states[stage][:, None]

    def terminal_factor(self, control: float) -> NDArray[np.float64]:
        return 1.0 + control * self._states[-1]

    def stage_factor(self, stage: int, control: float) -> NDArray[np.float64]:
        return np.exp(0.1 * control * self._states[stage])


def test_partition_equal_counts() -> None:
    """Sequential quantile splits give near-equal cells in every dimension."""
    rng = np.random.default_rng(1)
    samples = rng.normal(size=(900, 2))
    partition = build_partition(samples, cells_per_dim=3)
    assert partition.dim == 2
    assert partition.n_cells == 9
    counts = np.bincount(partition.locate(samples), minlength=9)
    assert counts.min() >= 99 and counts.max() <= 101

    line = build_partition(np.linspace(0.0, 1.0, 1000), cells_per_dim=4)
    np.testing.assert_array_equal(np.bincount(line.locate(np.linspace(0.0, 1.0, 1000))), [250] * 4)
    assert line.locate([-5.0, 5.0]).tolist() == [0, 3]

    print("✓ Partition cells balanced")


def test_partition_degenerate_and_small_inputs() -> None:
    """Constant strata collapse into one bin; too few samples are rejected."""
    samples = np.column_stack([np.linspace(0.0, 1.0, 100), np.full(100, 2.0)])
    partition = build_partition(samples, cells_per_dim=2)
    cells = partition.locate(samples)
    assert set(cells.tolist()) == {0, 2}

    with pytest.raises(ForecastInputError):
        build_partition(np.zeros((3, 2)), cells_per_dim=2)

    print("✓ Degenerate partitions handled")


def test_affine_targets_recovered_exactly() -> None:
    """Globally affine targets are reproduced in every cell."""
    rng = np.random.default_rng(2)
    states = rng.uniform(-3.0, 3.0, size=(2000, 2))
    targets = 1.0 + 2.0 * states[:, 0] - 3.0 * states[:, 1]
    partition = build_partition(states, cells_per_dim=5)
    fit = regress_local(partition, states, targets)
    assert fit.n_cells == 25
    np.testing.assert_allclose(fit.coefficients[:, 0], 1.0, atol=1e-8)
    np.testing.assert_allclose(fit.coefficients[:, 1], 2.0, atol=1e-8)
    np.testing.assert_allclose(fit.coefficients[:, 2], -3.0, atol=1e-8)

    queries = rng.uniform(-4.0, 4.0, size=(50, 2))
    np.testing.assert_allclose(
        evaluate_fit(fit, partition, queries),
        1.0 + 2.0 * queries[:, 0] - 3.0 * queries[:, 1],
        atol=1e-8,
    )
    assert evaluate_fit(fit, partition, [1.0, 1.0]) == pytest.approx(0.0, abs=1e-8)

    print("✓ Affine targets recovered exactly")


def test_residuals_orthogonal_within_cells() -> None:
    """Normal equations hold cell by cell."""
    rng = np.random.default_rng(3)
    states = rng.normal(size=(1500, 2))
    targets = np.sin(states[:, 0]) + states[:, 1] ** 2
    regressor = LocalRegressor(build_partition(states, cells_per_dim=4), states)
    beta = regressor.fit_standardized(targets)
    residuals = targets - regressor.fitted(beta)
    for cell in range(16):
        mask = regressor.cells == cell
        design = np.column_stack([np.ones(mask.sum()), states[mask]])
        np.testing.assert_allclose(design.T @ residuals[mask], 0.0, atol=1e-8)

    print("✓ Residuals orthogonal to the design")


def test_flat_and_sparse_cells() -> None:
    """Constant coordinates get zero slope; cells too small for a line get the mean."""
    x = np.linspace(0.0, 1.0, 200)
    states = np.column_stack([x, np.full(200, 5.0)])
    fit = regress_local(build_partition(states, cells_per_dim=2), states, 3.0 * x - 1.0)
    np.testing.assert_allclose(fit.coefficients[[0, 2], 1], 3.0, atol=1e-8)
    np.testing.assert_allclose(fit.coefficients[[0, 2], 2], 0.0, atol=1e-12)

    sparse = np.array([0.0, 1.0, 2.0, 3.0])
    partition = build_partition(sparse, cells_per_dim=2)
    regressor = LocalRegressor(partition, sparse)
    assert regressor.n_constant == 2
    means = regressor.fit(np.array([1.0, 3.0, 10.0, 20.0]))
    np.testing.assert_allclose(means.coefficients[:, 0], [2.0, 15.0])
    np.testing.assert_allclose(means.coefficients[:, 1], 0.0)

    with pytest.raises(ForecastInputError):
        regressor.fit(np.zeros(3))

    print("✓ Flat and sparse cells handled")


def test_single_stage_policy_exact() -> None:
    """With a target of 1 + φ·s the optimal control is −sign(s)."""
    s = np.random.default_rng(4).uniform(-1.0, 1.0, size=2000)
    config = LsmcConfig(n_paths=2000, cells_per_dim=4, control_grid=[-1.0, 0.0, 1.0])
    policy = solve_backward(AffineProblem([s]), config)
    assert policy.n_stages == 1
    assert policy.value_estimate == pytest.approx(float(np.mean(1.0 - np.abs(s))), abs=1e-10)
    np.testing.assert_array_equal(policy.decide(0, [[-0.5], [0.5], [0.9]]), [1.0, -1.0, -1.0])

    print("✓ Single-stage policy exact")


def test_ties_prefer_small_positions() -> None:
    """Equal fitted values resolve to the smallest |control|, negative first."""
    partition = build_partition(np.linspace(0.0, 1.0, 10), cells_per_dim=1)
    flat = StagePolicy(
        partition=partition, controls=[-1.0, 0.0, 1.0], coefficients=np.zeros((3, 1, 2))
    )
    np.testing.assert_array_equal(flat.decide([[0.2], [0.7]]), [0.0, 0.0])
    pair = StagePolicy(partition=partition, controls=[-1.0, 1.0], coefficients=np.zeros((2, 1, 2)))
    assert pair.decide([[0.3]]).tolist() == [-1.0]

    with pytest.raises(ValueError):
        StagePolicy(partition=partition, controls=[0.0], coefficients=np.zeros((2, 1, 2)))

    print("✓ Tie-breaking rule applied")


def test_multi_stage_solution_independent_of_threads() -> None:
    """The backward pass gives identical tables for any worker count."""
    rng = np.random.default_rng(5)
    states = [rng.normal(size=3000) for _ in range(3)]
    config = LsmcConfig(n_paths=3000, cells_per_dim=3, control_grid=[-0.5, 0.0, 0.5])
    serial: PolicyTable = solve_backward(AffineProblem(states), config)
    parallel: PolicyTable = solve_backward(AffineProblem(states), config, threads=3)
    assert serial.value_estimate == parallel.value_estimate
    for a, b in zip(serial.stages, parallel.stages):
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
    assert serial.value_estimate > 0.0

    print("✓ Backward induction deterministic")


def test_too_few_paths_for_cells() -> None:
    """Every cell must afford an affine regression."""
    config = LsmcConfig(n_paths=20, cells_per_dim=10, control_grid=[0.0])
    with pytest.raises(ForecastInputError):
        solve_backward(AffineProblem([np.linspace(0.0, 1.0, 20)]), config)

    print("✓ Undersized path sets rejected")


if __name__ == "__main__":
    print("Running LSMC tests...\n")
    test_partition_equal_counts()
    test_partition_degenerate_and_small_inputs()
    test_affine_targets_recovered_exactly()
    test_residuals_orthogonal_within_cells()
    test_flat_and_sparse_cells()
    test_single_stage_policy_exact()
    test_ties_prefer_small_positions()
    test_multi_stage_solution_independent_of_threads()
    test_too_few_paths_for_cells()
    print("\n✅ All LSMC tests passed!")
