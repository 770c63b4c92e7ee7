"""Deformable temporal-spectral forecasting of airport passenger flow."""
from .dataflow import (
    FlowSeries,
    SyntheticConfig,
    WindowSet,
    ZScoreScaler,
    generate_synthetic,
    load_csv,
    make_windows,
    write_csv,
    zscore_fit_apply,
)
from .estimator import DTSFormerRegressor, SeasonalNaiveForecaster
from .evalbench import MetricReport, dominant_period, improvement, metrics, seasonal_naive
from .fusion import DTSFormer, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import dft_real
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DTSFormer",
    "DTSFormerRegressor",
    "FlowSeries",
    "MetricReport",
    "ModelConfig",
    "SeasonalNaiveForecaster",
    "SyntheticConfig",
    "TrainConfig",
    "WindowSet",
    "ZScoreScaler",
    "dft_real",
    "dominant_period",
    "evaluate",
    "generate_synthetic",
    "improvement",
    "load_checkpoint",
    "load_csv",
    "make_windows",
    "metrics",
    "save_checkpoint",
    "seasonal_naive",
    "train",
    "write_csv",
    "zscore_fit_apply",
]
