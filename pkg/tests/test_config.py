"""Unit tests for environment settings and YAML configuration."""

import math
import tempfile
from pathlib import Path

import pytest
from pydantic import ValidationError

from domain.config import (
    ExperimentConfig,
    ForecastSetup,
    RecoveryConfig,
    SigmaMRule,
    Settings,
    load_experiment_config,
    load_recovery_config,
    load_yaml,
)
from domain.errors import ForecastInputError
from domain.models import MeanTransform, ModelFamily, RhoEstimator, Variable


def test_settings_from_env() -> None:
    """Prefixed variables set threads and log level; bad values are input errors."""
    settings = Settings.from_env(
        {"FORECAST_DYNAMICS_THREADS": "4", "FORECAST_DYNAMICS_LOG_LEVEL": "debug"}
    )
    assert settings.threads == 4
    assert settings.log_level == "DEBUG"
    assert Settings.from_env({}) == Settings()

    with pytest.raises(ForecastInputError):
        Settings.from_env({"FORECAST_DYNAMICS_THREADS": "0"})
    with pytest.raises(ForecastInputError):
        Settings.from_env({"FORECAST_DYNAMICS_LOG_LEVEL": "chatty"})

    print("✓ Settings read from environment")


def test_experiment_defaults() -> None:
    """Default trading experiment and the model B diffusion rule."""
    experiment = ExperimentConfig()
    assert experiment.forecast.family == ModelFamily.LOG_NIG
    assert experiment.trading.decision_times == [0.0, 6.0, 12.0, 18.0]
    assert experiment.trading.n_train == 200_000
    assert experiment.cells_per_dim == 15
    assert experiment.sigma_m() == pytest.approx(0.16 * math.sqrt(0.032))
    assert experiment.sigma_m(0.064) == pytest.approx(0.16 * math.sqrt(0.064))

    raw = experiment.model_copy(update={"sigma_m_rule": SigmaMRule.V0})
    assert raw.sigma_m(0.016) == 0.016

    params = experiment.forecast.model_params(delivery_time=24.0)
    assert params.rho.rate(5.0) == 0.16
    assert experiment.forecast.initial_state(v0=0.064).V == 0.064

    with pytest.raises(ValidationError):
        ForecastSetup(family=ModelFamily.NIG)
    with pytest.raises(ValidationError):
        ExperimentConfig(v0_levels=[-0.1])

    print("✓ Experiment defaults correct")


def test_trading_control_grids() -> None:
    """Fine grid without trend, wide grid with one."""
    trading = ExperimentConfig().trading
    flat = trading.control_grid(0.0)
    assert len(flat) == 201
    assert flat[0] == -1.0 and flat[100] == 0.0 and flat[-1] == 1.0
    trend = trading.control_grid(0.5)
    assert len(trend) == 201
    assert trend[0] == -5.0 and trend[-1] == 5.0

    print("✓ Control grids correct")


def test_recovery_presets() -> None:
    """Presets carry the generating values; scaling changes only locations."""
    wind = RecoveryConfig.preset(Variable.WIND_SPEED)
    assert wind.family == ModelFamily.LOG_NIG
    assert wind.rho == [0.171, 0.153, 0.168]
    assert wind.mean_range == (6.0, 13.0)
    assert wind.horizons == [12, 24, 36, 48]
    assert wind.records_per_horizon == 38 * 273

    log_wind = RecoveryConfig.preset(Variable.LOG_WIND_SPEED)
    assert log_wind.mean_transform == MeanTransform.LOG

    temperature = RecoveryConfig.preset(Variable.TEMPERATURE)
    assert temperature.family == ModelFamily.NIG
    assert temperature.b == 0.719

    small = wind.scaled(0.1)
    assert small.n_locations == 27
    assert small.n_issue == 38
    assert wind.scaled(1e-6).n_locations == 1
    with pytest.raises(ForecastInputError):
        wind.scaled(0.0)
    with pytest.raises(ValidationError):
        RecoveryConfig(**{**wind.model_dump(), "rho": [0.1]})

    print("✓ Recovery presets correct")


def test_load_configs_from_yaml(tmp_path: Path) -> None:
    """Preset selections, full configs and malformed files."""
    preset = tmp_path / "preset.yaml"
    preset.write_text("variable: temperature\nn_locations: 5\nseed: 9\n")
    config = load_recovery_config(preset)
    assert config.family == ModelFamily.NIG
    assert config.n_locations == 5
    assert config.seed == 9

    full = tmp_path / "full.yaml"
    full.write_text(
        "variable: wind_speed\n"
        "family: LogNig\n"
        "b: 0.05\n"
        "rho: [0.2]\n"
        "rho_estimator: factor_ratio\n"
        "coefficients:\n"
        "  - {horizon_h: 12, a0: 0.1, a1: 1.0, c: 0.2, d: 0.7, b: 0.05}\n"
        "  - {horizon_h: 24, a0: 0.1, a1: 1.0, c: 0.2, d: 0.7, b: 0.05}\n"
        "mean_range: [8.0, 12.0]\n"
        "factor_range: [0.03, 0.05]\n"
    )
    custom = load_recovery_config(full)
    assert custom.horizons == [12, 24]
    assert custom.rho_estimator == RhoEstimator.FACTOR_RATIO

    experiment = tmp_path / "experiment.yaml"
    experiment.write_text("seed: 5\ntrading:\n  n_train: 1000\nmu_s_levels: [0.5]\n")
    loaded = load_experiment_config(experiment)
    assert loaded.seed == 5
    assert loaded.trading.n_train == 1000
    assert loaded.trading.n_test == 100_000
    assert loaded.mu_s_levels == [0.5]

    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_yaml(empty) == {}
    assert load_experiment_config(empty) == ExperimentConfig()

    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ForecastInputError, match="mapping"):
        load_yaml(listing)
    broken = tmp_path / "broken.yaml"
    broken.write_text("seed: [1, 2\n")
    with pytest.raises(ForecastInputError, match="Invalid YAML"):
        load_yaml(broken)
    with pytest.raises(ForecastInputError, match="not found"):
        load_yaml(tmp_path / "absent.yaml")

    bad = tmp_path / "bad.yaml"
    bad.write_text("variable: humidity\n")
    with pytest.raises(ForecastInputError):
        load_recovery_config(bad)
    bad.write_text("cells_per_dim: 0\n")
    with pytest.raises(ForecastInputError):
        load_experiment_config(bad)

    print("✓ YAML configs loaded")


if __name__ == "__main__":
    print("Running config tests...\n")
    test_settings_from_env()
    test_experiment_defaults()
    test_trading_control_grids()
    test_recovery_presets()
    with tempfile.TemporaryDirectory() as tmp:
        test_load_configs_from_yaml(Path(tmp))
    print("\n✅ All config tests passed!")
