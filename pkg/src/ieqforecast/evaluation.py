"""Per-target and global error metrics in original units, plus the comparison-table CSV."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInputError
from .models import ModelParams, predict
from .pipeline import CHANNELS, N_TARGETS, Scaler, WindowedDataset

TARGET_LABELS = {
    "air_temperature": "Air Temperature",
    "indoor_co2": "Indoor CO2",
    "relative_humidity": "Humidity",
}
MODEL_LABELS = {"lstm": "LSTM", "gru": "GRU", "cnn_lstm": "Hybrid"}
METRIC_NAMES = ("MAE", "MSE", "RMSE", "R2")


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    rmse: float
    r2: float  # NaN when the targets have zero variance

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.mae, self.mse, self.rmse, self.r2)


def _metrics(pred: np.ndarray, truth: np.ndarray) -> Metrics:
    err = pred - truth
    mse = float(np.mean(err * err))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else math.nan
    return Metrics(float(np.mean(np.abs(err))), mse, math.sqrt(mse), r2)


def per_target_metrics(predictions, targets, scaler: Scaler) -> dict[str, Metrics]:
    """Denormalize both arrays and score each sensor channel separately."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != N_TARGETS:
        raise RejectedInputError(f"predictions {p.shape} and targets {t.shape} must both be (N, 3)")
    if len(p) == 0:
        raise RejectedInputError("no samples to score")
    cols = slice(0, N_TARGETS)
    p = scaler.inverse_transform(p, cols)
    t = scaler.inverse_transform(t, cols)
    return {name: _metrics(p[:, j], t[:, j]) for j, name in enumerate(CHANNELS)}


def aggregate_global(per_target) -> Metrics:
    """Global MAE/MSE/R2 are plain means over targets; global RMSE is sqrt of global MSE.

    Accepts a mapping of :class:`Metrics` or an iterable of (mae, mse, rmse, r2) tuples.
    """
    rows = [m.as_row() if isinstance(m, Metrics) else tuple(m)
            for m in (per_target.values() if isinstance(per_target, dict) else per_target)]
    if len(rows) != N_TARGETS:
        raise RejectedInputError(f"expected {N_TARGETS} per-target metric tuples, got {len(rows)}")
    mae = sum(r[0] for r in rows) / len(rows)
    mse = sum(r[1] for r in rows) / len(rows)
    r2 = sum(r[3] for r in rows) / len(rows)
    return Metrics(mae, mse, math.sqrt(mse), r2)


@dataclass
class MetricsReport:
    model: str
    sample_count: int
    per_target: dict[str, Metrics]
    global_metrics: Metrics
    seeds: dict = field(default_factory=dict)

    @property
    def undefined_r2(self) -> list[str]:
        return [n for n, m in self.per_target.items() if math.isnan(m.r2)]

    def to_dict(self) -> dict:
        def clean(m: Metrics):
            return {k: (None if math.isnan(v) else v) for k, v in asdict(m).items()}

        return {
            "format": "ieq-metrics-1",
            "model": self.model,
            "seeds": self.seeds,
            "sample_count": self.sample_count,
            "global": clean(self.global_metrics),
            "per_target": {n: clean(m) for n, m in self.per_target.items()},
            "undefined_r2": self.undefined_r2,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def predict_ordered(params: ModelParams, inputs, workers: int = 1, chunk: int = 512) -> np.ndarray:
    """Batched predictions; with ``workers > 1`` chunks run on threads and are reassembled in order."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if workers <= 1:
        return predict(params, inputs)
    chunks = [inputs[i : i + chunk] for i in range(0, len(inputs), chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: predict(params, c), chunks))
    return np.concatenate(parts) if parts else np.zeros((0, N_TARGETS))


def build_report(predictions, dataset: WindowedDataset, scaler: Scaler, model: str,
                 seeds: dict | None = None) -> MetricsReport:
    per_target = per_target_metrics(predictions, dataset.targets, scaler)
    return MetricsReport(model, len(dataset), per_target, aggregate_global(per_target), seeds or {})


def evaluate(params: ModelParams, test: WindowedDataset, scaler: Scaler, workers: int = 1,
             seeds: dict | None = None) -> MetricsReport:
    if test.n_features != params.spec.input_features:
        raise RejectedInputError(
            f"test set has {test.n_features} features, model expects {params.spec.input_features}")
    pred = predict_ordered(params, test.inputs, workers)
    seeds = {"model_seed": params.spec.seed, **(seeds or {})}
    return build_report(pred, test, scaler, params.spec.family, seeds)


def persistence_predictions(dataset: WindowedDataset) -> np.ndarray:
    """Last observed (normalized) sensor values of each window."""
    return dataset.inputs[:, -1, :N_TARGETS].copy()


def export_series(params: ModelParams, test: WindowedDataset, scaler: Scaler, path,
                  workers: int = 1) -> Path:
    """Write timestamp, truth and prediction per target, in original units."""
    pred = scaler.inverse_transform(predict_ordered(params, test.inputs, workers), slice(0, N_TARGETS))
    truth = scaler.inverse_transform(test.targets, slice(0, N_TARGETS))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["timestamp"]
        for name in CHANNELS:
            header += [f"{name}_true", f"{name}_pred"]
        w.writerow(header)
        for ts, t_row, p_row in zip(test.timestamps, truth, pred):
            row = [int(ts)]
            for a, b in zip(t_row, p_row):
                row += [repr(float(a)), repr(float(b))]
            w.writerow(row)
    return path


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def table_rows(reports: dict[str, MetricsReport]) -> tuple[list[str], list[list[str]]]:
    """Header and rows of the comparison table: metrics x (group, model)."""
    groups = [("Global", None)] + [(TARGET_LABELS[c], c) for c in CHANNELS]
    header = ["metric"] + [f"{g}/{MODEL_LABELS.get(m, m)}" for g, _ in groups for m in reports]
    rows = []
    for k, metric in enumerate(METRIC_NAMES):
        row = [metric]
        for _, channel in groups:
            for report in reports.values():
                m = report.global_metrics if channel is None else report.per_target[channel]
                row.append(_fmt(m.as_row()[k]))
        rows.append(row)
    return header, rows


def write_table(reports: dict[str, MetricsReport], path) -> None:
    header, rows = table_rows(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def format_table(reports: dict[str, MetricsReport], digits: int = 4) -> str:
    """Fixed-width text rendering for terminals."""
    header, rows = table_rows(reports)
    cells = [header] + [[r[0]] + [f"{float(v):.{digits}f}" for v in r[1:]] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)
