"""Exception types shared across the forecast-dynamics packages."""

from typing import Optional


class ForecastInputError(ValueError):
    """Invalid input: bad arguments, schema violations, or domain errors."""


class ConvergenceError(RuntimeError):
    """A numerical routine ran out of budget before meeting its tolerance."""

    def __init__(
        self,
        message: str,
        best_estimate: Optional[float] = None,
        abserr: Optional[float] = None,
    ) -> None:
        super().__init__(message)
        self.best_estimate: Optional[float] = best_estimate
        self.abserr: Optional[float] = abserr
