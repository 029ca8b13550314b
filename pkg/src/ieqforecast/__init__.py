"""Indoor environmental quality forecasting: preprocessing, recurrent forecasters, benchmarking."""

from .evaluation import MetricsReport, aggregate_global, evaluate, per_target_metrics
from .models import ModelParams, ModelSpec, forward, init_params, model_backward
from .pipeline import Scaler, TimeSeriesFrame, WindowedDataset, ingest_csv, prepare
from .synthdata import SynthConfig, generate
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "MetricsReport", "ModelParams", "ModelSpec", "Scaler", "SynthConfig", "TimeSeriesFrame",
    "TrainConfig", "WindowedDataset", "aggregate_global", "evaluate", "fit", "forward",
    "generate", "ingest_csv", "init_params", "model_backward", "per_target_metrics", "prepare",
]
