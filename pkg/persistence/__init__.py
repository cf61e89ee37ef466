"""Initialize persistence package."""

from persistence.artifacts import (
    hash_inputs,
    load_calibration,
    load_policy,
    read_manifest,
    save_calibration,
    save_policy,
    write_manifest,
)
from persistence.database import (
    DATABASE_NAME,
    create_coefficients,
    create_run,
    delete_run,
    get_all_runs,
    get_coefficients_for_run,
    get_db,
    get_run,
    init_db,
    record_run,
)

__all__: list[str] = [
    "DATABASE_NAME",
    "init_db",
    "get_db",
    "record_run",
    # Run CRUD
    "create_run",
    "get_run",
    "get_all_runs",
    "delete_run",
    # Coefficient CRUD
    "create_coefficients",
    "get_coefficients_for_run",
    # Artifacts
    "save_calibration",
    "load_calibration",
    "hash_inputs",
    "write_manifest",
    "read_manifest",
    "save_policy",
    "load_policy",
]
