#!/usr/bin/env python3
"""
Forecast Dynamics - Unified Command Script

Calibrate, score and simulate dynamic probabilistic forecasts, run the wind
trading experiment, and check parameter recovery on synthetic archives.
"""

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from dataio.ensembles import load_dataset
from domain.calibration import calibrate
from domain.config import (
    RECOVERY_MIN_RECORDS,
    ExperimentConfig,
    RecoveryConfig,
    Settings,
    load_experiment_config,
    load_recovery_config,
)
from domain.errors import ConvergenceError, ForecastInputError
from domain.forecast import quantile_bands, simulate_paths
from domain.models import (
    CalibrationResult,
    Dataset,
    ForecastState,
    MeanTransform,
    ModelFamily,
    ModelParams,
    PathSet,
    RhoEstimator,
    RhoSchedule,
    RunManifest,
    Variable,
)
from domain.scoring import DEFAULT_CI_SAMPLE, build_score_report
from domain.synthetic import generate_dataset
from domain.trading import ComparisonResult, compare_models
from persistence.artifacts import (
    hash_inputs,
    load_calibration,
    save_calibration,
    save_policy,
    write_manifest,
)
from persistence.database import DATABASE_NAME, record_run

logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_INPUT: int = 2
EXIT_NUMERICAL: int = 3

DEFAULT_SCORE_SAMPLE: int = 2000


def print_banner() -> None:
    """Print application banner."""
    banner = """
╔══════════════════════════════════════════════════════════╗
║                                                          ║
║         🌬️  Forecast Dynamics                            ║
║         Dynamic probabilistic forecasts & trading       ║
║                                                          ║
╚══════════════════════════════════════════════════════════╝
"""
    print(banner)


# Helper Functions
def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}") from e


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {text!r}") from e


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _json_safe(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "value"):
        return value.value
    return value


def _finish(
    args: argparse.Namespace,
    out_dir: Path,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    started_at: datetime,
    seed: Optional[int] = None,
    config_path: Optional[Path] = None,
    calibration: Optional[CalibrationResult] = None,
) -> None:
    """Write manifest.yaml next to the outputs and register the run."""
    parameters: dict[str, Any] = {
        k: _json_safe(v) for k, v in sorted(vars(args).items()) if k != "command"
    }
    manifest = RunManifest(
        command=args.command,
        config_path=str(config_path) if config_path is not None else None,
        seed=seed,
        threads=args.threads,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        input_hash=hash_inputs(inputs) if inputs else "",
        parameters=parameters,
        started_at=started_at,
        finished_at=datetime.now(tz=timezone.utc),
    )
    manifest_path: Path = write_manifest(manifest=manifest, out_dir=out_dir)
    run_id: int = record_run(
        db_path=out_dir / DATABASE_NAME, manifest=manifest, calibration=calibration
    )
    print(f"📁 Manifest: {manifest_path}")
    print(f"🗄️  Registered as run {run_id} in {out_dir / DATABASE_NAME}")


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False)
    print(f"✅ Wrote {path}")
    return path


def _diagnostics_frame(result: CalibrationResult) -> pd.DataFrame:
    diagnostics = result.diagnostics
    return pd.DataFrame(
        [
            {
                "horizon_h": h,
                "n_records": diagnostics.n_records.get(h),
                "loglik": diagnostics.loglik.get(h),
                "evaluations": diagnostics.evaluations.get(h),
            }
            for h in result.horizons
        ],
        columns=["horizon_h", "n_records", "loglik", "evaluations"],
    )


def _print_calibration(result: CalibrationResult) -> None:
    print(f"📈 {result.family.value} calibration of {result.variable.value}")
    for c in result.per_horizon:
        print(f"   {c.horizon_h:>3}h  a0={c.a0:.4f}  a1={c.a1:.4f}  c={c.c:.4f}  d={c.d:.4f}")
    print(f"   shared b = {result.shared_b:.4f}")
    if result.rho is not None:
        rates: str = ", ".join(f"{r:.4f}" for r in result.rho.values)
        print(f"   ρ = [{rates}]")
        for label, se in result.diagnostics.rho_stderr.items():
            print(f"   ρ {label} standard error {se:.4f}")
    for warning in result.diagnostics.warnings:
        print(f"⚠️  {warning}")


# Commands
def run_calibrate(args: argparse.Namespace) -> None:
    """Fit EMOS coefficients, shared shape and rates from CSV archives."""
    started_at: datetime = datetime.now(tz=timezone.utc)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"📥 Loading {args.ensembles} and {args.realizations}")
    dataset: Dataset = load_dataset(
        ensembles_path=args.ensembles,
        realizations_path=args.realizations,
        variable=args.variable,
    )
    if args.locations is not None:
        dataset = dataset.for_locations(args.locations)
    result: CalibrationResult = calibrate(
        dataset=dataset,
        family=args.family,
        mean_transform=args.mean_transform,
        estimator=args.rho_estimator,
        horizons=args.horizons,
        threads=args.threads,
    )
    _print_calibration(result)
    outputs: list[Path] = [
        save_calibration(result=result, path=out_dir / "coefficients.yaml"),
        _write_csv(_diagnostics_frame(result), out_dir / "diagnostics.csv"),
    ]
    _finish(
        args=args,
        out_dir=out_dir,
        inputs=[args.ensembles, args.realizations],
        outputs=outputs,
        started_at=started_at,
        calibration=result,
    )


def run_score(args: argparse.Namespace) -> None:
    """Score raw ensembles and, with coefficients, the calibrated predictive laws."""
    started_at: datetime = datetime.now(tz=timezone.utc)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    calibration: Optional[CalibrationResult] = (
        load_calibration(args.coeffs) if args.coeffs is not None else None
    )
    if args.variable is None and calibration is None:
        raise ForecastInputError("score needs --variable when no --coeffs are given")
    variable: Variable = args.variable or calibration.variable
    dataset: Dataset = load_dataset(
        ensembles_path=args.ensembles, realizations_path=args.realizations, variable=variable
    )
    if args.locations is not None:
        dataset = dataset.for_locations(args.locations)
    if calibration is None:
        print("ℹ️  No coefficients given: raw-ensemble scores only")
    report = build_score_report(
        dataset=dataset,
        calibration=calibration,
        horizons=args.horizons,
        pit_bins=args.pit_bins,
        ci_level=args.ci_level,
        sample_size=args.sample_size,
        ci_sample=args.ci_sample,
        seed=args.seed,
        threads=args.threads,
    )
    outputs: list[Path] = [
        _write_csv(frame, out_dir / f"{name}.csv") for name, frame in report.to_frames().items()
    ]
    print(f"📊 Scores{' (log scale)' if report.log_scale else ''}")
    for s in report.horizons:
        model: str = f"  CRPS model {s.crps_model:.4f}" if s.crps_model is not None else ""
        print(f"   {s.horizon_h:>3}h  CRPS raw {s.crps_raw:.4f}{model}")
    inputs: list[Path] = [args.ensembles, args.realizations]
    if args.coeffs is not None:
        inputs.append(args.coeffs)
    _finish(
        args=args,
        out_dir=out_dir,
        inputs=inputs,
        outputs=outputs,
        started_at=started_at,
        seed=args.seed,
    )


def _simulation_params(args: argparse.Namespace) -> ModelParams:
    if args.coeffs is not None:
        return load_calibration(args.coeffs).model_params(delivery_time=args.delivery)
    rates: list[float] = args.rho
    if len(rates) == 1:
        schedule: RhoSchedule = RhoSchedule.constant(rates[0])
    else:
        schedule = RhoSchedule(breakpoints=args.rho_breakpoints, values=rates)
    return ModelParams(family=args.family, b=args.b, rho=schedule, delivery_time=args.delivery)


def run_simulate(args: argparse.Namespace) -> None:
    """Simulate (m, V) paths and the predictive bands along them."""
    started_at: datetime = datetime.now(tz=timezone.utc)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    params: ModelParams = _simulation_params(args)
    paths: PathSet = simulate_paths(
        params=params,
        initial=ForecastState(t=0.0, m=args.m0, V=args.v0),
        grid=args.grid,
        n_paths=args.n,
        substeps=args.substeps,
        seed=args.seed,
        threads=args.threads,
    )
    band_ids: list[int] = list(range(min(args.band_paths, paths.n_paths)))
    bands: pd.DataFrame = quantile_bands(
        params=params, paths=paths, levels=args.levels, path_ids=band_ids
    )
    outputs: list[Path] = [
        _write_csv(paths.to_frame(), out_dir / "paths.csv"),
        _write_csv(bands, out_dir / "bands.csv"),
    ]

    last: np.ndarray = paths.m[:, -1]
    mean: float = float(np.mean(last))
    stderr: float = float(np.std(last, ddof=1) / np.sqrt(last.size)) if last.size > 1 else 0.0
    horizon: float = paths.time_grid[-1]
    print(f"🔁 Martingale check at t={horizon:g}h: mean m = {mean:.4f} ± {stderr:.4f}")
    if stderr > 0.0 and abs(mean - args.m0) > 3.0 * stderr:
        print(f"⚠️  Mean departs from m0={args.m0} by more than 3 standard errors")
    inputs: list[Path] = [args.coeffs] if args.coeffs is not None else []
    _finish(
        args=args,
        out_dir=out_dir,
        inputs=inputs,
        outputs=outputs,
        started_at=started_at,
        seed=args.seed,
    )


def run_trade(args: argparse.Namespace) -> None:
    """Train model A and model B policies and compare them on shared test paths."""
    started_at: datetime = datetime.now(tz=timezone.utc)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    experiment: ExperimentConfig = (
        load_experiment_config(args.config) if args.config is not None else ExperimentConfig()
    )
    if args.seed is not None:
        experiment = experiment.model_copy(update={"seed": args.seed})
    print(
        f"⚙️  {experiment.trading.n_train:,} training and {experiment.trading.n_test:,} "
        f"test paths per sweep point"
    )
    result: ComparisonResult = compare_models(
        experiment=experiment, threads=args.threads, keep_policies=args.save_policies
    )
    relative: pd.DataFrame = result.relative_frame()
    summary: pd.DataFrame = result.summary_frame()
    outputs: list[Path] = [
        _write_csv(relative[relative["sweep"] == "mu_s"], out_dir / "relative_profits.csv"),
        _write_csv(summary[summary["sweep"] == "v0"], out_dir / "uncertainty_sweep.csv"),
        _write_csv(summary, out_dir / "profit_stats.csv"),
    ]
    for point in result.points:
        flag: str = " *" if point.comparison.significant else ""
        print(
            f"   {point.sweep}={point.value:g}: A {point.stats_a.mean:.3f}  "
            f"B {point.stats_b.mean:.3f}  ({point.comparison.relative_pct:+.2f}%{flag})"
        )
        for tag, policy in point.policies.items():
            directory: Path = out_dir / "policies" / f"{point.sweep}_{point.value:g}_{tag}"
            outputs.append(save_policy(policy=policy, directory=directory))
    inputs: list[Path] = [args.config] if args.config is not None else []
    _finish(
        args=args,
        out_dir=out_dir,
        inputs=inputs,
        outputs=outputs,
        started_at=started_at,
        seed=experiment.seed,
        config_path=args.config,
    )


def run_recover(args: argparse.Namespace) -> None:
    """Generate a synthetic archive from known parameters and calibrate it back."""
    started_at: datetime = datetime.now(tz=timezone.utc)
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    config: RecoveryConfig = (
        load_recovery_config(args.config)
        if args.config is not None
        else RecoveryConfig.preset(args.variable)
    )
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    config = config.scaled(args.scale)
    if config.records_per_horizon < RECOVERY_MIN_RECORDS:
        print(
            f"⚠️  Only {config.records_per_horizon} records per horizon: "
            "expect wide confidence intervals on the recovered parameters"
        )
        logger.warning("recovery with %d records per horizon", config.records_per_horizon)

    print(f"🧪 Generating {config.records_per_horizon:,} records per horizon")
    dataset: Dataset = generate_dataset(
        truth=config.truth(),
        n_issue=config.n_issue,
        n_locations=config.n_locations,
        n_members=config.n_members,
        seed=config.seed,
        substeps=config.substeps,
    )
    result: CalibrationResult = calibrate(
        dataset=dataset,
        family=config.family,
        mean_transform=config.mean_transform,
        estimator=config.rho_estimator,
        threads=args.threads,
    )
    _print_calibration(result)
    errors: pd.DataFrame = config.recovery_errors(result)
    outputs: list[Path] = [
        save_calibration(result=result, path=out_dir / "coefficients.yaml"),
        _write_csv(errors, out_dir / "recovery_errors.csv"),
    ]
    worst = errors.loc[errors["rel_error"].idxmax()]
    print(f"🎯 Largest relative error: {worst['parameter']} {worst['rel_error']:.2%}")
    inputs: list[Path] = [args.config] if args.config is not None else []
    _finish(
        args=args,
        out_dir=out_dir,
        inputs=inputs,
        outputs=outputs,
        started_at=started_at,
        seed=config.seed,
        config_path=args.config,
        calibration=result,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Forecast Dynamics - Unified Command Script",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  forecast-dynamics calibrate --ensembles ens.csv --realizations obs.csv \\
      --variable wind_speed --out runs/calib
  forecast-dynamics score --ensembles ens.csv --realizations obs.csv \\
      --coeffs runs/calib/coefficients.yaml --out runs/score
  forecast-dynamics simulate --family LogNig --b 0.035 --rho 0.16 --m0 5.38 \\
      --v0 0.032 --grid 0,6,12,18 --n 1000 --out runs/sim
  forecast-dynamics trade --config experiment.yaml --out runs/trade
  forecast-dynamics recover --variable wind_speed --scale 0.1 --out runs/recover

Environment:
  FORECAST_DYNAMICS_THREADS    default worker threads (results do not depend on it)
  FORECAST_DYNAMICS_LOG_LEVEL  logging level (default INFO)
        """,
    )
    parser.add_argument("--threads", type=int, default=None, help="Worker threads")
    commands = parser.add_subparsers(dest="command", required=True)

    calib = commands.add_parser("calibrate", help="Calibrate a model from CSV archives")
    calib.add_argument("--ensembles", type=Path, required=True)
    calib.add_argument("--realizations", type=Path, required=True)
    calib.add_argument("--variable", type=Variable, choices=list(Variable), required=True)
    calib.add_argument("--family", type=ModelFamily, choices=list(ModelFamily))
    calib.add_argument("--mean-transform", type=MeanTransform, choices=list(MeanTransform))
    calib.add_argument("--rho-estimator", type=RhoEstimator, choices=list(RhoEstimator))
    calib.add_argument("--horizons", type=_int_list, help="e.g. 12,24,36,48")
    calib.add_argument("--locations", type=_str_list, help="Calibrate these locations only")
    calib.add_argument("--out", type=Path, required=True)

    score = commands.add_parser("score", help="Score raw and calibrated forecasts")
    score.add_argument("--ensembles", type=Path, required=True)
    score.add_argument("--realizations", type=Path, required=True)
    score.add_argument("--variable", type=Variable, choices=list(Variable))
    score.add_argument("--coeffs", type=Path, help="coefficients.yaml from calibrate")
    score.add_argument("--horizons", type=_int_list)
    score.add_argument("--locations", type=_str_list)
    score.add_argument("--pit-bins", type=int, default=20)
    score.add_argument("--ci-level", type=float, default=0.9)
    score.add_argument(
        "--sample-size",
        type=int,
        default=DEFAULT_SCORE_SAMPLE,
        help=f"Records per horizon for CRPS and PIT (default: {DEFAULT_SCORE_SAMPLE})",
    )
    score.add_argument("--ci-sample", type=int, default=DEFAULT_CI_SAMPLE)
    score.add_argument("--seed", type=int, default=0)
    score.add_argument("--out", type=Path, required=True)

    sim = commands.add_parser("simulate", help="Simulate forecast paths and bands")
    sim.add_argument("--family", type=ModelFamily, choices=list(ModelFamily))
    sim.add_argument("--b", type=float)
    sim.add_argument("--rho", type=_float_list, default=[0.16])
    sim.add_argument("--rho-breakpoints", type=_float_list, help="Lead times for several rates")
    sim.add_argument("--coeffs", type=Path, help="Take family, b and ρ from a calibration")
    sim.add_argument("--m0", type=float, required=True)
    sim.add_argument("--v0", type=float, required=True)
    sim.add_argument("--delivery", type=float, default=24.0)
    sim.add_argument("--grid", type=_float_list, default=[0.0, 6.0, 12.0, 18.0])
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--substeps", type=int, default=100)
    sim.add_argument("--levels", type=_float_list, default=[0.5, 0.9])
    sim.add_argument("--band-paths", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", type=Path, required=True)

    trade = commands.add_parser("trade", help="Compare model A and model B trading")
    trade.add_argument("--config", type=Path, help="Experiment YAML (default: built-in)")
    trade.add_argument("--seed", type=int)
    trade.add_argument("--save-policies", action="store_true")
    trade.add_argument("--out", type=Path, required=True)

    recover = commands.add_parser("recover", help="Synthetic parameter recovery")
    recover.add_argument(
        "--variable", type=Variable, choices=list(Variable), default=Variable.WIND_SPEED
    )
    recover.add_argument("--config", type=Path, help="Recovery YAML (default: preset)")
    recover.add_argument("--scale", type=float, default=1.0)
    recover.add_argument("--seed", type=int)
    recover.add_argument("--out", type=Path, required=True)
    return parser


def _check_simulate_args(args: argparse.Namespace) -> None:
    if args.coeffs is None and (args.family is None or args.b is None):
        raise ForecastInputError("simulate needs --family and --b, or --coeffs")
    if args.coeffs is None and len(args.rho) > 1 and args.rho_breakpoints is None:
        raise ForecastInputError("Several rates need --rho-breakpoints")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser: argparse.ArgumentParser = build_parser()
    args: argparse.Namespace = parser.parse_args(argv)

    try:
        settings: Settings = Settings.from_env()
    except ForecastInputError as e:
        print(f"❌ {e}")
        return EXIT_INPUT
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.threads is None:
        args.threads = settings.threads
    if args.threads < 1:
        print("❌ --threads must be at least 1")
        return EXIT_INPUT

    print_banner()

    try:
        if args.command == "calibrate":
            run_calibrate(args)
        elif args.command == "score":
            run_score(args)
        elif args.command == "simulate":
            _check_simulate_args(args)
            run_simulate(args)
        elif args.command == "trade":
            run_trade(args)
        elif args.command == "recover":
            run_recover(args)
    except (ForecastInputError, ValidationError, FileNotFoundError) as e:
        print(f"❌ {e}")
        logger.debug("input error", exc_info=True)
        return EXIT_INPUT
    except (ConvergenceError, FloatingPointError) as e:
        print(f"❌ Numerical failure: {e}")
        logger.debug("numerical failure", exc_info=True)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
