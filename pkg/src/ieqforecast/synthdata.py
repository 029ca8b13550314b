"""Seeded generator of room sensor series with known ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .models import make_rng
from .pipeline import STEP_SECONDS, TimeSeriesFrame

STEPS_PER_DAY = 86400 // STEP_SECONDS


@dataclass(frozen=True)
class SynthConfig:
    days: int = 14
    seed: int = 0
    start: int = 1709251200  # 2024-03-01T00:00:00Z
    temperature_base: float = 22.0
    temperature_amplitude: float = 3.0
    co2_baseline: float = 420.0
    co2_event_rate: float = 6.0  # occupancy events per day
    occupied_hours: tuple = (8, 17)  # events start inside this local-time window
    co2_event_magnitude: float = 800.0  # steady-state excess while occupied
    co2_event_duration_steps: int = 18
    co2_decay_steps: float = 24.0
    humidity_base: float = 45.0
    humidity_amplitude: float = 8.0
    temperature_noise: float = 0.05
    co2_noise: float = 5.0
    humidity_noise: float = 0.2
    gap_rate: float = 0.25  # gaps per day
    gap_min_steps: int = 1
    gap_max_steps: int = 4

    def __post_init__(self):
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        nonneg = ("temperature_amplitude", "co2_event_rate", "co2_event_magnitude", "humidity_amplitude",
                  "temperature_noise", "co2_noise", "humidity_noise", "gap_rate", "co2_baseline")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        lo, hi = self.occupied_hours
        if not 0 <= lo < hi <= 24:
            raise ConfigError("occupied_hours must satisfy 0 <= start < end <= 24")
        if self.co2_event_duration_steps < 1:
            raise ConfigError("co2_event_duration_steps must be >= 1")
        if self.co2_decay_steps <= 0:
            raise ConfigError("co2_decay_steps must be > 0")
        if not 1 <= self.gap_min_steps <= self.gap_max_steps:
            raise ConfigError("need 1 <= gap_min_steps <= gap_max_steps")


@dataclass
class GroundTruthLog:
    timestamps: np.ndarray
    clean: np.ndarray  # (N, 3) noiseless signals
    gaps: list = field(default_factory=list)  # (start_step, length), as injected
    events: list = field(default_factory=list)  # occupancy event steps
    config: dict = field(default_factory=dict)

    @property
    def gap_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.timestamps), dtype=bool)
        for start, length in self.gaps:
            mask[start : start + length] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "gaps": [[int(s), int(n)] for s, n in self.gaps],
            "events": [int(e) for e in self.events],
            "timestamps": self.timestamps.tolist(),
            "clean": self.clean.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")


def generate(config: SynthConfig = SynthConfig()) -> tuple[TimeSeriesFrame, GroundTruthLog]:
    rng = make_rng(config.seed)
    n = config.days * STEPS_PER_DAY
    steps = np.arange(n)
    timestamps = config.start + STEP_SECONDS * steps.astype(np.int64)
    phase = 2.0 * np.pi * np.mod(timestamps, 86400) / 86400.0

    temperature = config.temperature_base + config.temperature_amplitude * np.sin(phase)
    humidity = config.humidity_base + config.humidity_amplitude * np.cos(phase)

    n_events = rng.poisson(config.co2_event_rate * config.days)
    lo, hi = (h * 3600 // STEP_SECONDS for h in config.occupied_hours)
    day = rng.integers(0, config.days, size=n_events)
    events = np.sort(day * STEPS_PER_DAY + rng.integers(lo, hi, size=n_events))
    # the room is either occupied or not; overlapping events merge
    count = np.zeros(n + 1)
    np.add.at(count, events, 1.0)
    np.add.at(count, np.minimum(events + config.co2_event_duration_steps, n), -1.0)
    occupancy = (np.cumsum(count)[:n] > 0).astype(np.float64)
    # first-order mass balance: excess relaxes toward magnitude * occupancy
    decay = np.exp(-1.0 / config.co2_decay_steps)
    drive = (1.0 - decay) * config.co2_event_magnitude * occupancy
    excess = np.empty(n)
    level = 0.0
    for t in range(n):
        level = level * decay + drive[t]
        excess[t] = level
    co2 = config.co2_baseline + excess

    clean = np.stack([temperature, co2, humidity], axis=1)
    sigma = np.array([config.temperature_noise, config.co2_noise, config.humidity_noise])
    observed = clean + rng.standard_normal((n, 3)) * sigma

    n_gaps = rng.poisson(config.gap_rate * config.days)
    starts = rng.integers(0, n, size=n_gaps)
    lengths = rng.integers(config.gap_min_steps, config.gap_max_steps + 1, size=n_gaps)
    gaps = sorted((int(s), int(min(l, n - s))) for s, l in zip(starts, lengths))

    log = GroundTruthLog(timestamps, clean, gaps, events.tolist(), asdict(config))
    observed[log.gap_mask] = np.nan
    return TimeSeriesFrame(timestamps, observed), log
