"""Forecast metrics, portfolio construction and the evaluation harness."""

from .harness import DayForecaster, ModelForecaster, PPCAForecaster, TruthForecaster, evaluate
from .metrics import (
    calibration_error,
    covariance_diagnostics,
    sharpe_ratio,
    universe_calibration,
    write_metrics,
)
from .portfolio import PortfolioSpec, backtest, optimize_portfolio

__all__ = ["DayForecaster", "ModelForecaster", "PPCAForecaster", "PortfolioSpec", "TruthForecaster",
           "backtest", "calibration_error", "covariance_diagnostics", "evaluate", "optimize_portfolio",
           "sharpe_ratio", "universe_calibration", "write_metrics"]
