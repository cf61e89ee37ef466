"""Initialize dataio package."""

from dataio.ensembles import (
    ENSEMBLE_COLUMNS,
    REALIZATION_COLUMNS,
    derive_wind_speed,
    join_forecast_realization,
    load_dataset,
    load_ensemble_csv,
    load_realizations_csv,
    write_dataset_csv,
)

__all__: list[str] = [
    # Schemas
    "ENSEMBLE_COLUMNS",
    "REALIZATION_COLUMNS",
    # Loading
    "load_ensemble_csv",
    "load_realizations_csv",
    "load_dataset",
    "join_forecast_realization",
    "derive_wind_speed",
    # Writing
    "write_dataset_csv",
]
