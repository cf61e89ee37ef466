"""Deterministic random streams over fixed-size path blocks.

Paths are cut into blocks of BLOCK_SIZE; block j always draws from the
generator seeded by SeedSequence(seed, spawn_key=(j,)), so the output does not
depend on how many threads process the blocks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

from domain.errors import ForecastInputError

logger = logging.getLogger(__name__)

BLOCK_SIZE: int = 4096

T = TypeVar("T")


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Generator for one path block."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(block,)))


def block_bounds(n: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges covering n paths."""
    if n < 1:
        raise ForecastInputError(f"Need at least one path, got {n}")
    return [(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def map_blocks(
    fn: Callable[[int, int, np.random.Generator], T],
    n: int,
    seed: int,
    threads: int = 1,
    block_size: int = BLOCK_SIZE,
) -> list[T]:
    """
    Apply fn(start, stop, rng) to every block and return results in block order.

    Args:
        fn: Work for one block; must only touch its own slice
        n: Total number of paths
        seed: Root seed
        threads: Worker threads; results are identical for any value
        block_size: Paths per block

    Returns:
        One result per block, ordered by block index
    """
    bounds: list[tuple[int, int]] = block_bounds(n=n, block_size=block_size)

    def run(index: int) -> T:
        start, stop = bounds[index]
        return fn(start, stop, block_rng(seed=seed, block=index))

    if threads <= 1 or len(bounds) == 1:
        return [run(i) for i in range(len(bounds))]

    logger.debug("dispatching %d blocks over %d threads", len(bounds), threads)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(run, range(len(bounds))))
