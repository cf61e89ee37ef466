"""Initialize domain package."""

from domain.calibration import calibrate, emos_predictive, estimate_rho
from domain.config import (
    ExperimentConfig,
    RecoveryConfig,
    Settings,
    load_experiment_config,
    load_recovery_config,
)
from domain.errors import ConvergenceError, ForecastInputError
from domain.forecast import (
    draw_terminal,
    log_predictive_density,
    predictive_cdf,
    predictive_density,
    predictive_moments,
    predictive_quantile,
    quantile_bands,
    sample_terminal,
    simulate_paths,
    time_change,
)
from domain.lsmc import PolicyTable, build_partition, regress_local, solve_backward
from domain.models import (
    CalibrationResult,
    Dataset,
    EnsembleRecord,
    ForecastState,
    HorizonCoefficients,
    LsmcConfig,
    MarketParams,
    MeanTransform,
    ModelFamily,
    ModelParams,
    ModelVariant,
    PathSet,
    ProfitStats,
    RhoEstimator,
    RhoSchedule,
    RunManifest,
    TradingConfig,
    Variable,
    VariantTag,
)
from domain.scoring import build_score_report, crps_ensemble, crps_parametric
from domain.synthetic import SyntheticTruth, generate_dataset
from domain.trading import (
    compare_models,
    evaluate_policy,
    power_curve,
    profit,
    simulate_joint,
    train_policy,
)

__all__: list[str] = [
    # Errors
    "ForecastInputError",
    "ConvergenceError",
    # Models
    "ModelParams",
    "ForecastState",
    "RhoSchedule",
    "PathSet",
    "EnsembleRecord",
    "Dataset",
    "HorizonCoefficients",
    "CalibrationResult",
    "LsmcConfig",
    "MarketParams",
    "TradingConfig",
    "ModelVariant",
    "ProfitStats",
    "RunManifest",
    # Enums
    "ModelFamily",
    "Variable",
    "MeanTransform",
    "RhoEstimator",
    "VariantTag",
    # Configuration
    "Settings",
    "ExperimentConfig",
    "RecoveryConfig",
    "load_experiment_config",
    "load_recovery_config",
    # Forecast dynamics
    "time_change",
    "simulate_paths",
    "draw_terminal",
    "sample_terminal",
    "predictive_moments",
    "predictive_density",
    "log_predictive_density",
    "predictive_cdf",
    "predictive_quantile",
    "quantile_bands",
    # Calibration
    "calibrate",
    "emos_predictive",
    "estimate_rho",
    # Scoring
    "crps_ensemble",
    "crps_parametric",
    "build_score_report",
    # Synthetic data
    "SyntheticTruth",
    "generate_dataset",
    # Regression Monte Carlo
    "build_partition",
    "regress_local",
    "solve_backward",
    "PolicyTable",
    # Trading
    "power_curve",
    "simulate_joint",
    "profit",
    "train_policy",
    "evaluate_policy",
    "compare_models",
]
