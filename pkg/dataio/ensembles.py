"""Long-format CSV ingest and egress of ensemble forecasts and realizations."""

import logging
from datetime import datetime
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from pydantic import ValidationError

from domain.errors import ForecastInputError
from domain.models import Dataset, EnsembleRecord, Variable

logger = logging.getLogger(__name__)

ENSEMBLE_COLUMNS: list[str] = [
    "issue_time",
    "horizon_h",
    "location",
    "member",
    "variable",
    "value",
]
REALIZATION_COLUMNS: list[str] = ["valid_time", "location", "variable", "value"]

TEMPERATURE_CODE: str = "t2m"
WIND_CODES: tuple[str, str] = ("wind_u", "wind_v")

TIME_FORMAT: str = "%Y-%m-%dT%H:%M:%SZ"

Key = tuple[datetime, int, str]


def derive_wind_speed(u: ArrayLike, v: ArrayLike) -> float | NDArray[np.float64]:
    """Wind speed √(u² + v²) from its components."""
    speed: NDArray[np.float64] = np.hypot(
        np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    )
    if np.ndim(speed) == 0:
        return float(speed)
    return speed


def _variable_codes(variable: Variable) -> tuple[str, ...]:
    if variable == Variable.TEMPERATURE:
        return (TEMPERATURE_CODE,)
    return WIND_CODES


# Helper Functions
def _read_long_csv(path: Path | str, columns: list[str]) -> pd.DataFrame:
    """Read a long-format CSV and check its header exactly."""
    source: Path = Path(path)
    if not source.exists():
        raise ForecastInputError(f"File not found: {source}")
    try:
        frame: pd.DataFrame = pd.read_csv(filepath_or_buffer=source, dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ForecastInputError(f"Failed to parse {source}: {e}") from e
    if list(frame.columns) != columns:
        raise ForecastInputError(
            f"{source}: header {list(frame.columns)} does not match {columns}"
        )
    frame["line"] = np.arange(len(frame)) + 2
    return frame


def _parse_times(frame: pd.DataFrame, column: str, source: str) -> pd.Series:
    parsed: pd.Series = pd.to_datetime(frame[column], utc=True, errors="coerce")
    bad: pd.Series = parsed.isna()
    if bad.any():
        line: int = int(frame.loc[bad, "line"].iloc[0])
        raise ForecastInputError(
            f"{source}:{line}: malformed timestamp {frame.loc[bad, column].iloc[0]!r}"
        )
    return parsed


def _parse_numbers(
    frame: pd.DataFrame, column: str, source: str, integral: bool = False
) -> pd.Series:
    parsed: pd.Series = pd.to_numeric(frame[column], errors="coerce")
    bad: pd.Series = parsed.isna() | ~np.isfinite(parsed.astype(float))
    if integral:
        bad |= parsed.astype(float) % 1 != 0
    if bad.any():
        line: int = int(frame.loc[bad, "line"].iloc[0])
        raise ForecastInputError(
            f"{source}:{line}: malformed {column} {frame.loc[bad, column].iloc[0]!r}"
        )
    return parsed.astype(int) if integral else parsed.astype(float)


def _first_duplicate_line(frame: pd.DataFrame, subset: list[str]) -> int | None:
    duplicated: pd.Series = frame.duplicated(subset=subset, keep="first")
    if duplicated.any():
        return int(frame.loc[duplicated, "line"].iloc[0])
    return None


def _combine_components(
    frame: pd.DataFrame, index: list[str], variable: Variable, source: str
) -> pd.Series:
    """Collapse the variable's rows into one value per index entry."""
    if variable == Variable.TEMPERATURE:
        return frame.set_index(index)["value"]

    wide: pd.DataFrame = frame.pivot(index=index, columns="variable", values="value")
    for code in WIND_CODES:
        if code not in wide.columns:
            raise ForecastInputError(f"{source}: no {code} rows")
    incomplete: pd.DataFrame = wide[wide[list(WIND_CODES)].isna().any(axis=1)]
    if not incomplete.empty:
        raise ForecastInputError(
            f"{source}: missing wind component for {incomplete.index[0]}"
        )
    return pd.Series(
        derive_wind_speed(u=wide["wind_u"].to_numpy(), v=wide["wind_v"].to_numpy()),
        index=wide.index,
    )


def load_ensemble_csv(path: Path | str, variable: Variable) -> list[EnsembleRecord]:
    """
    Parse a long-format ensemble file into one record per forecast key.

    Args:
        path: CSV with header issue_time,horizon_h,location,member,variable,value
        variable: Which variable to assemble; wind speed is composed from
            wind_u and wind_v members

    Returns:
        Records sorted by (issue_time, horizon_h, location), no realizations

    Raises:
        ForecastInputError: on a malformed row (with its line number), a
            duplicated (key, member), or a key missing members
    """
    source: str = str(path)
    frame: pd.DataFrame = _read_long_csv(path=path, columns=ENSEMBLE_COLUMNS)
    frame = frame[frame["variable"].isin(_variable_codes(variable))].copy()
    if frame.empty:
        raise ForecastInputError(f"{source}: no rows for variable {variable.value}")

    frame["issue_time"] = _parse_times(frame=frame, column="issue_time", source=source)
    frame["horizon_h"] = _parse_numbers(frame, "horizon_h", source, integral=True)
    frame["member"] = _parse_numbers(frame, "member", source, integral=True)
    frame["value"] = _parse_numbers(frame, "value", source)
    if (frame["horizon_h"] <= 0).any():
        line: int = int(frame.loc[frame["horizon_h"] <= 0, "line"].iloc[0])
        raise ForecastInputError(f"{source}:{line}: horizon must be positive")

    key_columns: list[str] = ["issue_time", "horizon_h", "location", "member"]
    duplicate: int | None = _first_duplicate_line(frame, [*key_columns, "variable"])
    if duplicate is not None:
        raise ForecastInputError(f"{source}:{duplicate}: duplicate (key, member) row")

    values: pd.Series = _combine_components(
        frame=frame, index=key_columns, variable=variable, source=source
    )
    members: pd.DataFrame = values.unstack("member").sort_index()
    incomplete: pd.DataFrame = members[members.isna().any(axis=1)]
    if not incomplete.empty:
        issue, horizon, location = incomplete.index[0]
        raise ForecastInputError(
            f"{source}: missing members for key "
            f"({issue.strftime(TIME_FORMAT)}, {horizon}h, {location})"
        )
    if members.shape[1] < 2:
        raise ForecastInputError(f"{source}: ensembles need at least two members")

    records: list[EnsembleRecord] = []
    try:
        for (issue, horizon, location), row in members.iterrows():
            records.append(
                EnsembleRecord(
                    issue_time=issue.to_pydatetime(),
                    horizon_h=int(horizon),
                    location=str(location),
                    members=row.to_numpy(dtype=np.float64).tolist(),
                )
            )
    except ValidationError as e:
        raise ForecastInputError(f"{source}: invalid record: {e}") from e
    logger.info("loaded %d ensemble records from %s", len(records), source)
    return records


def load_realizations_csv(
    path: Path | str, variable: Variable
) -> dict[tuple[datetime, str], float]:
    """Parse realizations keyed by (valid_time, location)."""
    source: str = str(path)
    frame: pd.DataFrame = _read_long_csv(path=path, columns=REALIZATION_COLUMNS)
    frame = frame[frame["variable"].isin(_variable_codes(variable))].copy()
    if frame.empty:
        raise ForecastInputError(f"{source}: no rows for variable {variable.value}")

    frame["valid_time"] = _parse_times(frame=frame, column="valid_time", source=source)
    frame["value"] = _parse_numbers(frame, "value", source)
    duplicate: int | None = _first_duplicate_line(
        frame, ["valid_time", "location", "variable"]
    )
    if duplicate is not None:
        raise ForecastInputError(f"{source}:{duplicate}: duplicate realization row")

    values: pd.Series = _combine_components(
        frame=frame, index=["valid_time", "location"], variable=variable, source=source
    )
    return {
        (valid.to_pydatetime(), str(location)): float(value)
        for (valid, location), value in values.items()
    }


def join_forecast_realization(
    forecasts: Iterable[EnsembleRecord],
    realizations: dict[tuple[datetime, str], float],
    variable: Variable,
) -> Dataset:
    """
    Attach each forecast's realization at valid_time = issue_time + horizon.

    Records without a realization are dropped and counted.

    Raises:
        ForecastInputError: if nothing joins
    """
    joined: list[EnsembleRecord] = []
    dropped: int = 0
    for record in forecasts:
        observed: float | None = realizations.get((record.valid_time, record.location))
        if observed is None:
            dropped += 1
            continue
        joined.append(record.model_copy(update={"realization": observed}))

    if not joined:
        raise ForecastInputError("No forecast matched a realization")
    if dropped:
        logger.warning("dropped %d forecasts without realization", dropped)
    return Dataset(variable=variable, records=joined, dropped=dropped)


def load_dataset(
    ensembles_path: Path | str, realizations_path: Path | str, variable: Variable
) -> Dataset:
    """Load both files and join them."""
    forecasts: list[EnsembleRecord] = load_ensemble_csv(path=ensembles_path, variable=variable)
    observed: dict[tuple[datetime, str], float] = load_realizations_csv(
        path=realizations_path, variable=variable
    )
    return join_forecast_realization(
        forecasts=forecasts, realizations=observed, variable=variable
    )


def write_dataset_csv(
    dataset: Dataset, ensembles_path: Path | str, realizations_path: Path | str
) -> None:
    """
    Write a dataset back to the two long-format files.

    Wind speed is written as wind_u = speed, wind_v = 0 so that reloading
    reproduces the same speeds.
    """
    codes: list[tuple[str, float]] = (
        [(TEMPERATURE_CODE, 1.0)]
        if dataset.variable == Variable.TEMPERATURE
        else [("wind_u", 1.0), ("wind_v", 0.0)]
    )
    ensemble_rows: list[tuple[str, int, str, int, str, float]] = []
    observed: dict[tuple[str, str], float] = {}
    for record in sorted(dataset.records, key=lambda r: r.key):
        issue: str = record.issue_time.strftime(TIME_FORMAT)
        for member, value in enumerate(record.members):
            for code, weight in codes:
                ensemble_rows.append(
                    (issue, record.horizon_h, record.location, member, code, value * weight)
                )
        if record.realization is not None:
            observed[(record.valid_time.strftime(TIME_FORMAT), record.location)] = (
                record.realization
            )

    pd.DataFrame(ensemble_rows, columns=ENSEMBLE_COLUMNS).to_csv(
        ensembles_path, index=False
    )
    realization_rows: list[tuple[str, str, str, float]] = [
        (valid, location, code, value * weight)
        for (valid, location), value in sorted(observed.items())
        for code, weight in codes
    ]
    pd.DataFrame(realization_rows, columns=REALIZATION_COLUMNS).to_csv(
        realizations_path, index=False
    )
