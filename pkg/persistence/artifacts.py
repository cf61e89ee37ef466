"""Files written next to every run: coefficients, manifests and policies."""

import hashlib
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from domain.errors import ForecastInputError
from domain.lsmc import CellPartition, PolicyTable, StagePolicy
from domain.models import CalibrationResult, RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME: str = "manifest.yaml"
POLICY_HEADER: str = "policy.yaml"

# Fixed gzip header time so repeated runs write identical bytes.
GZIP_OPTIONS: dict[str, Any] = {"method": "gzip", "mtime": 0}


def _dump_yaml(data: dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        yaml.safe_dump(data, f, sort_keys=False, allow_unicode=True)


def _read_yaml(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ForecastInputError(f"File not found: {path}")
    with path.open() as f:
        try:
            data: Any = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ForecastInputError(f"Invalid YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ForecastInputError(f"{path} must contain a mapping")
    return data


# Calibration coefficients
def save_calibration(result: CalibrationResult, path: Path | str) -> Path:
    """Write a calibration as a YAML document: one block per horizon plus the shared part."""
    target: Path = Path(path)
    _dump_yaml(result.model_dump(mode="json"), target)
    logger.info("wrote coefficients for %d horizons to %s", len(result.per_horizon), target)
    return target


def load_calibration(path: Path | str) -> CalibrationResult:
    """Read a calibration written by save_calibration."""
    source: Path = Path(path)
    try:
        return CalibrationResult(**_read_yaml(source))
    except ValidationError as e:
        raise ForecastInputError(f"Invalid coefficients file {source}: {e}") from e


# Manifests
def hash_inputs(paths: Sequence[Path | str]) -> str:
    """SHA-256 over the names and bytes of the input files, in the given order."""
    digest = hashlib.sha256()
    for path in paths:
        source: Path = Path(path)
        digest.update(source.name.encode())
        with source.open("rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


def write_manifest(manifest: RunManifest, out_dir: Path | str) -> Path:
    target: Path = Path(out_dir) / MANIFEST_NAME
    _dump_yaml(manifest.model_dump(mode="json"), target)
    return target


def read_manifest(path: Path | str) -> RunManifest:
    source: Path = Path(path)
    if source.is_dir():
        source = source / MANIFEST_NAME
    try:
        return RunManifest(**_read_yaml(source))
    except ValidationError as e:
        raise ForecastInputError(f"Invalid manifest {source}: {e}") from e


# Policies
def _stage_frames(stage: StagePolicy) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Coefficient rows (control, cell, intercept, slope_j) and threshold rows."""
    n_controls, n_cells, width = stage.coefficients.shape
    coefficients: pd.DataFrame = pd.DataFrame(
        stage.coefficients.reshape(n_controls * n_cells, width),
        columns=["intercept", *[f"slope_{j}" for j in range(1, width)]],
    )
    coefficients.insert(0, "cell", np.tile(np.arange(n_cells), n_controls))
    coefficients.insert(0, "control", np.repeat(np.asarray(stage.controls), n_cells))

    rows: list[dict[str, Any]] = []
    for level, splits in enumerate(stage.partition.thresholds):
        for stratum, values in enumerate(splits):
            row: dict[str, Any] = {"level": level, "stratum": stratum}
            row.update({f"split_{k}": float(v) for k, v in enumerate(values)})
            rows.append(row)
    return coefficients, pd.DataFrame(rows)


def save_policy(policy: PolicyTable, directory: Path | str) -> Path:
    """
    Write a policy as policy.yaml plus two gzipped CSVs per stage.

    Args:
        policy: Trained policy
        directory: Target directory, created if needed

    Returns:
        The directory
    """
    target: Path = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    header: dict[str, Any] = {
        "n_stages": policy.n_stages,
        "value_estimate": policy.value_estimate,
        "stages": [],
    }
    for i, stage in enumerate(policy.stages):
        coefficients, thresholds = _stage_frames(stage)
        coefficients.to_csv(
            target / f"stage_{i}_coefficients.csv.gz", index=False, compression=GZIP_OPTIONS
        )
        thresholds.to_csv(
            target / f"stage_{i}_thresholds.csv.gz", index=False, compression=GZIP_OPTIONS
        )
        header["stages"].append(
            {
                "cells_per_dim": stage.partition.cells_per_dim,
                "dim": stage.partition.dim,
                "controls": list(stage.controls),
            }
        )
    _dump_yaml(header, target / POLICY_HEADER)
    return target


def load_policy(directory: Path | str) -> PolicyTable:
    """Read a policy written by save_policy."""
    source: Path = Path(directory)
    header: dict[str, Any] = _read_yaml(source / POLICY_HEADER)
    stages: list[StagePolicy] = []
    for i, meta in enumerate(header["stages"]):
        q: int = int(meta["cells_per_dim"])
        dim: int = int(meta["dim"])
        controls: list[float] = [float(c) for c in meta["controls"]]

        coefficients: pd.DataFrame = pd.read_csv(
            source / f"stage_{i}_coefficients.csv.gz", float_precision="round_trip"
        )
        values: np.ndarray = coefficients.drop(columns=["control", "cell"]).to_numpy()
        thresholds_frame: pd.DataFrame = pd.read_csv(
            source / f"stage_{i}_thresholds.csv.gz", float_precision="round_trip"
        )
        thresholds: list[np.ndarray] = []
        for level in range(dim):
            rows: pd.DataFrame = thresholds_frame[thresholds_frame["level"] == level]
            splits: np.ndarray = (
                rows.sort_values("stratum")
                .drop(columns=["level", "stratum"])
                .to_numpy(dtype=np.float64)
                .reshape(q**level, q - 1)
            )
            thresholds.append(splits)

        stages.append(
            StagePolicy(
                partition=CellPartition(cells_per_dim=q, thresholds=thresholds),
                controls=controls,
                coefficients=values.reshape(len(controls), q**dim, dim + 1),
            )
        )
    return PolicyTable(stages=stages, value_estimate=float(header["value_estimate"]))
