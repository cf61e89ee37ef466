"""Regression Monte Carlo with adaptive local cells.

The state space is cut by sequential conditional quantiles into cells of
near-equal sample counts; inside every cell the conditional expectation is
fitted by an affine function of the state. solve_backward runs the dynamic
program backward over a discrete control grid, updating the value path-wise
with the realized target at the chosen control.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from domain.errors import ForecastInputError
from domain.models import LsmcConfig

logger = logging.getLogger(__name__)

# Cells whose Gram matrix is worse conditioned than this get a constant fit.
MAX_CONDITION: float = 1e10

DECISION_CHUNK: int = 4096

FLAT_SPREAD: float = 1e-6


def _as_states(states: ArrayLike, dim: Optional[int] = None) -> NDArray[np.float64]:
    """
    Two-dimensional (n, d) view of states. A flat input is one state when it
    has length d, otherwise a sample of a one-dimensional state.
    """
    x: NDArray[np.float64] = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        single: bool = dim is not None and dim > 1 and x.size == dim
        return x.reshape(1, -1) if single else x.reshape(-1, 1)
    if x.ndim == 0:
        return x.reshape(1, 1)
    return x


class CellPartition(BaseModel):
    """
    Sequential quantile tree over a d-dimensional state.

    thresholds[j] has shape (q^j, q − 1): row r holds the split points of
    dimension j inside the r-th stratum of the first j dimensions. A state
    goes to bin k of dimension j when exactly k thresholds lie below it.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    cells_per_dim: int = Field(..., ge=1)
    thresholds: list[NDArray[np.float64]]

    @model_validator(mode="after")
    def validate_shapes(self) -> "CellPartition":
        q: int = self.cells_per_dim
        for j, level in enumerate(self.thresholds):
            if level.shape != (q**j, q - 1):
                raise ValueError(f"Level {j} must have shape {(q**j, q - 1)}, got {level.shape}")
        return self

    @property
    def dim(self) -> int:
        return len(self.thresholds)

    @property
    def n_cells(self) -> int:
        return self.cells_per_dim**self.dim

    def locate(self, states: ArrayLike) -> NDArray[np.intp]:
        """Cell index of every state; states outside the range land in boundary cells."""
        x: NDArray[np.float64] = _as_states(states, dim=self.dim)
        if x.shape[1] != self.dim:
            raise ForecastInputError(f"Expected {self.dim}-dimensional states, got {x.shape[1]}")
        index: NDArray[np.intp] = np.zeros(x.shape[0], dtype=np.intp)
        for j, level in enumerate(self.thresholds):
            below: NDArray[np.intp] = np.sum(level[index] < x[:, j : j + 1], axis=1)
            index = index * self.cells_per_dim + below
        return index


def _stratum_thresholds(values: NDArray[np.float64], q: int) -> Optional[NDArray[np.float64]]:
    """Last value of each of the first q − 1 near-equal groups, or None if degenerate."""
    if values.size < q or values.min() == values.max():
        return None
    groups: list[NDArray[np.float64]] = np.array_split(np.sort(values), q)
    return np.asarray([g[-1] for g in groups[:-1]])


def build_partition(samples: ArrayLike, cells_per_dim: int) -> CellPartition:
    """
    Split dimension 1 into cells_per_dim strata by empirical quantiles, then
    each stratum on dimension 2, and so on.

    Strata that are constant or too small to split collapse into their first
    bin with a warning.

    Raises:
        ForecastInputError: with fewer samples than cells
    """
    x: NDArray[np.float64] = _as_states(samples)
    n, dim = x.shape
    q: int = cells_per_dim
    if q < 1:
        raise ForecastInputError(f"Need at least one cell per dimension, got {q}")
    if n < q**dim:
        raise ForecastInputError(f"{n} samples cannot fill {q}^{dim} cells")

    thresholds: list[NDArray[np.float64]] = []
    index: NDArray[np.intp] = np.zeros(n, dtype=np.intp)
    degenerate: int = 0
    for j in range(dim):
        level: NDArray[np.float64] = np.full((q**j, q - 1), np.inf)
        order: NDArray[np.intp] = np.argsort(index, kind="stable")
        bounds: NDArray[np.intp] = np.searchsorted(index[order], np.arange(q**j + 1))
        for r in range(q**j):
            members: NDArray[np.float64] = x[order[bounds[r] : bounds[r + 1]], j]
            if members.size == 0 or q == 1:
                continue
            split: Optional[NDArray[np.float64]] = _stratum_thresholds(members, q)
            if split is None:
                degenerate += 1
                continue
            level[r] = split
        thresholds.append(level)
        below: NDArray[np.intp] = np.sum(level[index] < x[:, j : j + 1], axis=1)
        index = index * q + below
    if degenerate:
        logger.warning("%d degenerate strata collapsed to a single bin", degenerate)
    return CellPartition(cells_per_dim=q, thresholds=thresholds)


class LocalAffineFit(BaseModel):
    """Per-cell coefficients (intercept, slopes) in state coordinates."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coefficients: NDArray[np.float64]

    @property
    def n_cells(self) -> int:
        return int(self.coefficients.shape[0])


class LocalRegressor:
    """
    Cell-wise least squares against a fixed set of states.

    Centering, scaling and the inverse Gram matrix of every cell are computed
    once and reused for every target.
    """

    def __init__(self, partition: CellPartition, states: ArrayLike) -> None:
        x: NDArray[np.float64] = _as_states(states, dim=partition.dim)
        self.partition: CellPartition = partition
        self.cells: NDArray[np.intp] = partition.locate(x)
        n_cells: int = partition.n_cells
        dim: int = x.shape[1]

        self.order: NDArray[np.intp] = np.argsort(self.cells, kind="stable")
        sorted_cells: NDArray[np.intp] = self.cells[self.order]
        self.starts: NDArray[np.intp] = np.searchsorted(sorted_cells, np.arange(n_cells))
        counts: NDArray[np.int64] = np.bincount(self.cells, minlength=n_cells)
        self.occupied: NDArray[np.bool_] = counts > 0

        safe: NDArray[np.float64] = np.maximum(counts, 1)[:, None]
        center: NDArray[np.float64] = self._cell_sum(x) / safe
        spread: NDArray[np.float64] = np.sqrt(
            np.maximum(self._cell_sum(x * x) / safe - center**2, 0.0)
        )
        # Spreads at rounding level of the center are constant coordinates.
        spread = np.where(spread > FLAT_SPREAD * np.maximum(np.abs(center), 1.0), spread, 0.0)
        scale: NDArray[np.float64] = np.where(spread > 0.0, spread, 1.0)
        self.center: NDArray[np.float64] = center
        self.scale: NDArray[np.float64] = scale

        self.design: NDArray[np.float64] = np.empty((x.shape[0], dim + 1))
        self.design[:, 0] = 1.0
        self.design[:, 1:] = np.where(
            spread[self.cells] > 0.0, (x - center[self.cells]) / scale[self.cells], 0.0
        )

        outer: NDArray[np.float64] = self.design[:, :, None] * self.design[:, None, :]
        gram: NDArray[np.float64] = self._cell_sum(outer.reshape(x.shape[0], -1)).reshape(
            n_cells, dim + 1, dim + 1
        )
        # A coordinate constant inside a cell has a zero design column; pin its slope to 0.
        flat_cell, flat_dim = np.nonzero((spread == 0.0) & (counts > 0)[:, None])
        gram[flat_cell, flat_dim + 1, flat_dim + 1] = 1.0
        well_posed: NDArray[np.bool_] = counts >= dim + 2
        if np.any(well_posed):
            well_posed[well_posed] = np.linalg.cond(gram[well_posed]) < MAX_CONDITION
        self.inverse: NDArray[np.float64] = np.zeros_like(gram)
        if np.any(well_posed):
            self.inverse[well_posed] = np.linalg.inv(gram[well_posed])
        constant: NDArray[np.bool_] = ~well_posed & self.occupied
        self.inverse[constant, 0, 0] = 1.0 / counts[constant]
        self.n_constant: int = int(constant.sum())
        if self.n_constant:
            logger.warning(
                "%d of %d cells rank-deficient, using constant fits",
                self.n_constant, int(self.occupied.sum()),
            )

    def _cell_sum(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Per-cell column sums; empty cells give zero rows."""
        total: NDArray[np.float64] = np.zeros((self.partition.n_cells, values.shape[1]))
        sizes: NDArray[np.intp] = np.diff(np.append(self.starts, len(self.order)))
        occupied: NDArray[np.intp] = np.flatnonzero(sizes > 0)
        if occupied.size:
            sums: NDArray[np.float64] = np.add.reduceat(
                values[self.order], self.starts[occupied], axis=0
            )
            total[occupied] = sums
        return total

    def fit_standardized(self, targets: NDArray[np.float64]) -> NDArray[np.float64]:
        """Per-cell coefficients on the standardized design."""
        moments: NDArray[np.float64] = self._cell_sum(self.design * targets[:, None])
        return np.einsum("cij,cj->ci", self.inverse, moments)

    def fitted(self, beta: NDArray[np.float64]) -> NDArray[np.float64]:
        """Regression values at the training states."""
        return np.einsum("ni,ni->n", self.design, beta[self.cells])

    def to_state_coordinates(self, beta: NDArray[np.float64]) -> LocalAffineFit:
        slopes: NDArray[np.float64] = beta[:, 1:] / self.scale
        intercept: NDArray[np.float64] = beta[:, 0] - np.sum(slopes * self.center, axis=1)
        return LocalAffineFit(coefficients=np.column_stack([intercept, slopes]))

    def fit(self, targets: ArrayLike) -> LocalAffineFit:
        y: NDArray[np.float64] = np.asarray(targets, dtype=np.float64)
        if y.shape != self.cells.shape:
            raise ForecastInputError(f"Need {self.cells.size} targets, got {y.size}")
        return self.to_state_coordinates(self.fit_standardized(y))


def regress_local(
    partition: CellPartition, states: ArrayLike, targets: ArrayLike
) -> LocalAffineFit:
    """Per-cell OLS of the targets on (1, state)."""
    return LocalRegressor(partition=partition, states=states).fit(targets=targets)


def evaluate_fit(
    fit: LocalAffineFit, partition: CellPartition, states: ArrayLike
) -> float | NDArray[np.float64]:
    """Affine value of the cell containing each state."""
    x: NDArray[np.float64] = _as_states(states, dim=partition.dim)
    beta: NDArray[np.float64] = fit.coefficients[partition.locate(x)]
    values: NDArray[np.float64] = beta[:, 0] + np.einsum("ni,ni->n", beta[:, 1:], x)
    if np.ndim(states) == 0 or (np.ndim(states) == 1 and x.shape[0] == 1):
        return float(values[0])
    return values


# Backward induction
class StageProblem(Protocol):
    """Multiplicative dynamic program over simulated paths."""

    @property
    def n_stages(self) -> int: ...

    def states(self, stage: int) -> NDArray[np.float64]:
        """Regression state at the stage's decision time, shape (n, d)."""
        ...

    def terminal_factor(self, control: float) -> NDArray[np.float64]:
        """Per-path factor of the last stage for the given control."""
        ...

    def stage_factor(self, stage: int, control: float) -> NDArray[np.float64]:
        """Per-path factor of an earlier stage for the given control."""
        ...


class StagePolicy(BaseModel):
    """Partition and per-control value fits of one decision time."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    partition: CellPartition
    controls: list[float]
    coefficients: NDArray[np.float64]

    @model_validator(mode="after")
    def validate_coefficients(self) -> "StagePolicy":
        expected: tuple[int, int, int] = (
            len(self.controls), self.partition.n_cells, self.partition.dim + 1,
        )
        if self.coefficients.shape != expected:
            raise ValueError(
                f"Coefficients must have shape {expected}, "
                f"got {self.coefficients.shape}"
            )
        return self

    def decide(self, states: ArrayLike) -> NDArray[np.float64]:
        """Control with the smallest fitted value; ties go to the smallest |control|."""
        x: NDArray[np.float64] = _as_states(states, dim=self.partition.dim)
        cells: NDArray[np.intp] = self.partition.locate(x)
        order: list[int] = _tie_order(self.controls)
        chosen: NDArray[np.float64] = np.empty(x.shape[0])
        for start in range(0, x.shape[0], DECISION_CHUNK):
            stop: int = min(start + DECISION_CHUNK, x.shape[0])
            beta: NDArray[np.float64] = self.coefficients[:, cells[start:stop]]
            values: NDArray[np.float64] = beta[:, :, 0] + np.einsum(
                "kni,ni->kn", beta[:, :, 1:], x[start:stop]
            )
            best: NDArray[np.float64] = np.full(stop - start, np.inf)
            picked: NDArray[np.float64] = np.zeros(stop - start)
            for k in order:
                better: NDArray[np.bool_] = values[k] < best
                best[better] = values[k][better]
                picked[better] = self.controls[k]
            chosen[start:stop] = picked
        return chosen


class PolicyTable(BaseModel):
    """Feedback policy over all decision times."""

    stages: list[StagePolicy] = Field(..., min_length=1)
    value_estimate: float

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def decide(self, stage: int, states: ArrayLike) -> NDArray[np.float64]:
        return self.stages[stage].decide(states)


def _tie_order(controls: Sequence[float]) -> list[int]:
    """Indices ordered by |control|, negative first on equal magnitude."""
    return sorted(range(len(controls)), key=lambda k: (abs(controls[k]), controls[k]))


def solve_backward(
    problem: StageProblem, config: LsmcConfig, threads: int = 1
) -> PolicyTable:
    """
    Backward induction i = N−1, ..., 0 over the control grid.

    At the last stage the regression target is the terminal factor; earlier
    the continuation value times the stage factor. Every path takes the
    control minimizing its fitted value, and its value becomes the realized
    target at that control.

    Args:
        problem: Factors and states on the training paths
        config: Cells per dimension and control grid
        threads: Workers over controls (results do not depend on it)

    Returns:
        PolicyTable with the estimated initial value E[product of factors]
    """
    controls: list[float] = list(config.control_grid)
    order: list[int] = _tie_order(controls)
    stages: list[StagePolicy] = []
    value: Optional[NDArray[np.float64]] = None

    for stage in range(problem.n_stages - 1, -1, -1):
        states: NDArray[np.float64] = _as_states(problem.states(stage))
        config.check_dimension(states.shape[1])
        partition: CellPartition = build_partition(states, config.cells_per_dim)
        regressor = LocalRegressor(partition=partition, states=states)
        continuation: Optional[NDArray[np.float64]] = value

        def evaluate(k: int) -> tuple[NDArray[np.float64], ...]:
            control: float = controls[k]
            if continuation is None:
                target: NDArray[np.float64] = problem.terminal_factor(control)
            else:
                target = continuation * problem.stage_factor(stage, control)
            beta: NDArray[np.float64] = regressor.fit_standardized(target)
            return beta, regressor.fitted(beta), target

        coefficients: NDArray[np.float64] = np.empty(
            (len(controls), partition.n_cells, states.shape[1] + 1)
        )
        best: NDArray[np.float64] = np.full(states.shape[0], np.inf)
        realized: NDArray[np.float64] = np.empty(states.shape[0])
        batch: int = max(threads, 1)
        executor: Optional[ThreadPoolExecutor] = (
            ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        )
        try:
            for first in range(0, len(order), batch):
                chunk: list[int] = order[first : first + batch]
                results = (
                    list(executor.map(evaluate, chunk))
                    if executor is not None
                    else [evaluate(k) for k in chunk]
                )
                for k, (beta, fitted, target) in zip(chunk, results):
                    coefficients[k] = regressor.to_state_coordinates(beta).coefficients
                    better: NDArray[np.bool_] = fitted < best
                    best[better] = fitted[better]
                    realized[better] = target[better]
        finally:
            if executor is not None:
                executor.shutdown()

        value = realized
        stages.insert(
            0, StagePolicy(partition=partition, controls=controls, coefficients=coefficients)
        )
        logger.info("stage %d solved: mean value %.6g", stage, float(np.mean(value)))

    return PolicyTable(stages=stages, value_estimate=float(np.mean(value)))
