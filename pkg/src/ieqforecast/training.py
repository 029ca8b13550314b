"""Mini-batch training: MAE loss, Adam, halve-on-plateau learning rate, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RejectedInputError, TrainingAborted
from .models import ModelParams, ModelSpec, forward, init_params, make_rng, model_backward, predict
from .pipeline import WindowedDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    initial_lr: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-6
    early_stop_patience: int = 7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.min_lr > self.initial_lr:
            raise ConfigError("min_lr must not exceed initial_lr")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    val_rmse: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_mae(self) -> list[float]:
        return [r.val_mae for r in self.records]

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self, path, include_time: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            cols = ["epoch", "train_mae", "val_mae", "val_rmse", "lr"]
            w.writerow(cols + (["seconds"] if include_time else []))
            for r in self.records:
                row = [r.epoch, repr(r.train_mae), repr(r.val_mae), repr(r.val_rmse), repr(r.lr)]
                w.writerow(row + ([f"{r.seconds:.6f}"] if include_time else []))


def mae_loss(predictions, targets):
    """Mean absolute error over every entry, and its gradient (``sign(0) = 0``)."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise RejectedInputError(f"predictions {p.shape} and targets {t.shape} differ")
    diff = p - t
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    g = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(g).all():
        raise TrainingAborted("non-finite gradient passed to Adam")
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    t = state.t + 1
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, factor: float = 0.5, patience: int = 3, min_lr: float = 1e-6):
        self.factor, self.patience, self.min_lr = factor, patience, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best:
            self.best, self.wait = val_loss, 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return max(lr * self.factor, self.min_lr)
        return lr


class EarlyStopper:
    """Signal a stop once ``patience`` consecutive epochs bring no new best."""

    def __init__(self, patience: int = 7):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def step(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, self.epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def validation_errors(params: ModelParams, data: WindowedDataset) -> tuple[float, float]:
    """(MAE, RMSE) on normalized targets."""
    diff = predict(params, data.inputs) - data.targets
    return float(np.abs(diff).mean()), float(np.sqrt((diff * diff).mean()))


def fit(spec: ModelSpec, train: WindowedDataset, validation: WindowedDataset,
        config: TrainConfig = TrainConfig(), params: ModelParams | None = None):
    """Train one model; returns the best-validation parameters and the epoch history."""
    if len(train) == 0 or len(validation) == 0:
        raise RejectedInputError("fit needs non-empty training and validation sets")
    if train.n_features != spec.input_features:
        raise RejectedInputError(
            f"dataset has {train.n_features} features, model expects {spec.input_features}")

    params = init_params(spec) if params is None else params.copy()
    vec = params.flatten()
    state = AdamState.zeros(vec.size)
    rng = make_rng(config.shuffle_seed)
    scheduler = PlateauScheduler(config.lr_factor, config.lr_patience, config.min_lr)
    stopper = EarlyStopper(config.early_stop_patience)
    history = TrainHistory()
    best = params.copy()
    lr = config.initial_lr
    n = len(train)

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            current = ModelParams.unflatten(spec, vec)
            pred, cache = forward(current, train.inputs[idx])
            loss, grad = mae_loss(pred, train.targets[idx])
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {bi}, lr {lr:g}")
            try:
                vec, state = adam_step(vec, model_backward(current, cache, grad), state, lr,
                                       config.adam_beta1, config.adam_beta2, config.adam_eps)
            except TrainingAborted as exc:
                raise TrainingAborted(f"{exc} at epoch {epoch}, batch {bi}, lr {lr:g}") from None
            loss_sum += loss * len(idx)

        current = ModelParams.unflatten(spec, vec)
        val_mae, val_rmse = validation_errors(current, validation)
        if not math.isfinite(val_mae):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}, lr {lr:g}")
        history.records.append(EpochRecord(epoch, loss_sum / n, val_mae, val_rmse, lr,
                                           time.perf_counter() - started))
        log.debug("%s epoch %d train %.5f val %.5f lr %g", spec.family, epoch, loss_sum / n, val_mae, lr)

        stop = stopper.step(val_mae)
        if stopper.best_epoch == epoch:
            best = current
            history.best_epoch = epoch
        lr = scheduler.step(val_mae, lr)
        if stop:
            history.stopped_early = True
            break
    return best, history
