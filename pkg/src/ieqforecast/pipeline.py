"""Raw sensor CSV -> regular grid -> gap handling -> scaled windows -> chronological splits."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDatasetError, RejectedInputError, SchemaError

STEP_SECONDS = 300
SNAP_TOLERANCE_SECONDS = 60
CHANNELS = ("air_temperature", "indoor_co2", "relative_humidity")
CYCLICAL = ("day_sin", "day_cos", "month_sin", "month_cos")
FEATURES = CHANNELS + CYCLICAL
N_TARGETS = len(CHANNELS)

# physical plausibility bounds for a point to count as valid
CHANNEL_RANGES = {
    "air_temperature": (-40.0, 60.0),
    "indoor_co2": (0.0, 10000.0),
    "relative_humidity": (0.0, 100.0),
}

DEFAULT_SCHEMA = {"timestamp": "timestamp", **{c: c for c in CHANNELS}}

DATASET_MAGIC = b"IEQW1"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def channel_validity(values: np.ndarray) -> np.ndarray:
    """Per-channel mask: finite and inside the physical range."""
    ok = np.isfinite(values)
    for j, name in enumerate(CHANNELS):
        lo, hi = CHANNEL_RANGES[name]
        with np.errstate(invalid="ignore"):
            ok[:, j] &= (values[:, j] >= lo) & (values[:, j] <= hi)
    return ok


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Timestamped three-channel sensor record set.

    ``values`` is (N, 3) in :data:`CHANNELS` order; out-of-range or missing
    readings are stored as NaN. ``valid[i]`` holds when every channel at ``i``
    is present and physically plausible.
    """

    timestamps: np.ndarray
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64).copy()
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1, N_TARGETS)
        if len(ts) != len(vals):
            raise RejectedInputError("timestamps and values differ in length")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise RejectedInputError("timestamps must be strictly increasing")
        ok = channel_validity(vals)
        vals[~ok] = np.nan
        valid = ok.all(axis=1)
        if self.valid is not None:
            valid &= np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "valid", _frozen(valid))

    def __len__(self) -> int:
        return len(self.timestamps)

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, CHANNELS.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", *CHANNELS])
            for t, row in zip(self.timestamps, self.values):
                w.writerow([int(t)] + ["" if not np.isfinite(v) else repr(float(v)) for v in row])


@dataclass(frozen=True)
class ContinuousSegment:
    start_index: int
    end_index: int  # inclusive

    def __len__(self) -> int:
        return self.end_index - self.start_index + 1


def parse_timestamp(text: str) -> int:
    """Epoch seconds from an epoch number or an ISO-8601 string (naive means UTC)."""
    text = text.strip()
    try:
        return int(round(float(text)))
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp()))


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def ingest_csv(path, schema: dict | None = None) -> TimeSeriesFrame:
    """Read a sensor CSV into a sorted, de-duplicated frame.

    ``schema`` maps ``timestamp`` and each channel name to the file's column
    header. Numeric cells that do not parse are kept as invalid points.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RejectedInputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        cols = {}
        for key in ("timestamp", *CHANNELS):
            name = schema[key]
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r} (for {key})")
            cols[key] = header.index(name)

        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                stamps.append(parse_timestamp(rec[cols["timestamp"]]))
            except (ValueError, IndexError) as exc:
                raise RejectedInputError(f"{path}:{lineno}: bad timestamp ({exc})") from None
            rows.append([_parse_float(rec[cols[c]]) if cols[c] < len(rec) else math.nan
                         for c in CHANNELS])
    if not stamps:
        raise RejectedInputError(f"{path}: no data rows")

    ts = np.asarray(stamps, dtype=np.int64)
    vals = np.asarray(rows, dtype=np.float64)
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    _, first = np.unique(ts, return_index=True)
    return TimeSeriesFrame(ts[first], vals[first])


def regularize(frame: TimeSeriesFrame, step: int = STEP_SECONDS,
               tolerance: int = SNAP_TOLERANCE_SECONDS) -> TimeSeriesFrame:
    """Snap timestamps onto the ``step`` grid and make missing grid points explicit.

    Points farther than ``tolerance`` seconds from their grid point are
    discarded; when several points snap to the same grid point the earliest
    one wins. Empty grid points come back as invalid (NaN) rows.
    """
    if len(frame) == 0:
        raise RejectedInputError("cannot regularize an empty frame")
    ts = frame.timestamps
    snapped = np.floor_divide(ts + step // 2, step) * step
    keep = np.abs(ts - snapped) <= tolerance
    if not keep.any():
        raise RejectedInputError("no timestamps within snapping tolerance of the grid")
    snapped, vals, valid = snapped[keep], frame.values[keep], frame.valid[keep]
    snapped, first = np.unique(snapped, return_index=True)
    vals, valid = vals[first], valid[first]

    grid = np.arange(snapped[0], snapped[-1] + step, step, dtype=np.int64)
    pos = (snapped - snapped[0]) // step
    out_vals = np.full((len(grid), N_TARGETS), np.nan)
    out_valid = np.zeros(len(grid), dtype=bool)
    out_vals[pos] = vals
    out_valid[pos] = valid
    return TimeSeriesFrame(grid, out_vals, out_valid)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """(start, end_inclusive) of each maximal True run."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def interpolate_short_gaps(frame: TimeSeriesFrame, max_gap_steps: int = 6) -> TimeSeriesFrame:
    """Fill short invalid runs with a cubic through the two valid points on each side.

    A run qualifies when it has at most ``max_gap_steps`` points and the two
    points immediately before and after it are valid. Channels observed inside
    the run are kept; only missing channel values are filled.
    """
    valid = frame.valid
    n = len(frame)
    vals = np.array(frame.values, copy=True)
    filled = valid.copy()
    for start, end in _runs(~valid):
        length = end - start + 1
        if length > max_gap_steps or start < 2 or end > n - 3:
            continue
        anchors = np.array([start - 2, start - 1, end + 1, end + 2])
        if not valid[anchors].all():
            continue
        # center on the gap for conditioning
        x0 = 0.5 * (start + end)
        xa = anchors - x0
        xg = np.arange(start, end + 1) - x0
        for j in range(N_TARGETS):
            coef = np.polyfit(xa, vals[anchors, j], 3)
            fill = np.polyval(coef, xg)
            seg = vals[start : end + 1, j]
            missing = ~np.isfinite(seg)
            seg[missing] = fill[missing]
        filled[start : end + 1] = True
    return TimeSeriesFrame(frame.timestamps, vals, filled)


def extract_segments(frame: TimeSeriesFrame, min_length: int = 13) -> list[ContinuousSegment]:
    """Maximal runs of valid, grid-contiguous points with at least ``min_length`` points."""
    if min_length < 13:
        raise ConfigError(f"min_length must be >= 13 to yield a window, got {min_length}")
    mask = frame.valid.copy()
    segments = []
    for start, end in _runs(mask):
        # also split on timestamp discontinuities in case the frame is not regularized
        ts = frame.timestamps[start : end + 1]
        breaks = np.flatnonzero(np.diff(ts) != STEP_SECONDS) + 1
        bounds = [0, *breaks.tolist(), len(ts)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b - a >= min_length:
                segments.append(ContinuousSegment(start + a, start + b - 1))
    return segments


def encode_cyclical(timestamps, utc_offset_seconds: int = 0) -> np.ndarray:
    """(day_sin, day_cos, month_sin, month_cos) per timestamp.

    The day pair encodes time of day; the month pair encodes calendar month
    with January at angle zero. Local time is UTC plus ``utc_offset_seconds``.
    Scalar input returns shape (4,), array input (N, 4).
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    scalar = ts.ndim == 0
    local = np.atleast_1d(ts) + int(utc_offset_seconds)
    day_angle = 2.0 * np.pi * np.mod(local, 86400) / 86400.0
    month = local.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12
    month_angle = 2.0 * np.pi * month / 12.0
    out = np.stack(
        [np.sin(day_angle), np.cos(day_angle), np.sin(month_angle), np.cos(month_angle)],
        axis=-1,
    )
    return out[0] if scalar else out


@dataclass(frozen=True)
class Scaler:
    """Per-feature min/max scaling to [0, 1]; values outside the fit range are not clipped."""

    mins: np.ndarray
    maxs: np.ndarray
    names: tuple = FEATURES

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=np.float64).copy()
        maxs = np.asarray(self.maxs, dtype=np.float64).copy()
        if mins.shape != maxs.shape or np.any(maxs < mins):
            raise RejectedInputError("scaler requires max >= min per feature")
        object.__setattr__(self, "mins", _frozen(mins))
        object.__setattr__(self, "maxs", _frozen(maxs))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def spans(self) -> np.ndarray:
        span = self.maxs - self.mins
        return np.where(span == 0, 1.0, span)

    @property
    def constant_features(self) -> list[str]:
        return [n for n, lo, hi in zip(self.names, self.mins, self.maxs) if lo == hi]

    def _cols(self, columns):
        return slice(None) if columns is None else columns

    def transform(self, x, columns=None) -> np.ndarray:
        c = self._cols(columns)
        return (np.asarray(x, dtype=np.float64) - self.mins[c]) / self.spans[c]

    def inverse_transform(self, x, columns=None) -> np.ndarray:
        c = self._cols(columns)
        return np.asarray(x, dtype=np.float64) * self.spans[c] + self.mins[c]

    def to_dict(self) -> dict:
        return {
            "format": "ieq-scaler-1",
            "features": [
                {"name": n, "min": float(lo), "max": float(hi)}
                for n, lo, hi in zip(self.names, self.mins, self.maxs)
            ],
            "constant_features": self.constant_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        feats = d["features"]
        return cls(
            np.array([f["min"] for f in feats]),
            np.array([f["max"] for f in feats]),
            tuple(f["name"] for f in feats),
        )

    def save(self, path) -> None:
        # json writes floats via repr, which round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Scaler":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def window_offsets(segments, window: int = 12, horizon: int = 1) -> np.ndarray:
    """Start row of every sample, chronologically; a sample spans ``window + horizon`` rows."""
    span = window + horizon
    parts = [np.arange(s.start_index, s.end_index - span + 2, dtype=np.int64)
             for s in segments if len(s) >= span]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def split_sizes(n: int, fractions=(0.85, 0.075, 0.075)) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    # the epsilon absorbs representation error such as 0.075 * 1000 = 74.999...
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def feature_matrix(frame: TimeSeriesFrame, utc_offset_seconds: int = 0) -> np.ndarray:
    """(N, 7) raw features: the three channels followed by the cyclical encoding."""
    return np.concatenate([frame.values, encode_cyclical(frame.timestamps, utc_offset_seconds)], axis=1)


def fit_scaler(frame: TimeSeriesFrame, segments, train_fraction: float = 0.85,
               window: int = 12, horizon: int = 1) -> Scaler:
    """Fit min/max on the rows feeding the input windows of the training samples only."""
    if not segments:
        raise EmptyDatasetError("no segments to fit a scaler on")
    offsets = window_offsets(segments, window, horizon)
    n_train = math.floor(train_fraction * len(offsets) + 1e-9)
    if n_train == 0:
        raise EmptyDatasetError("no training samples to fit a scaler on")
    rows = np.unique((offsets[:n_train, None] + np.arange(window)).ravel())
    sensor = frame.values[rows]
    mins = np.concatenate([sensor.min(axis=0), -np.ones(len(CYCLICAL))])
    maxs = np.concatenate([sensor.max(axis=0), np.ones(len(CYCLICAL))])
    return Scaler(mins, maxs)


@dataclass(frozen=True)
class WindowedDataset:
    inputs: np.ndarray  # (N, window, features)
    targets: np.ndarray  # (N, 3)
    timestamps: np.ndarray  # (N,) target-time epoch seconds

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        stamps = np.asarray(self.timestamps, dtype=np.int64)
        if inputs.ndim != 3 or targets.ndim != 2 or not (len(inputs) == len(targets) == len(stamps)):
            raise RejectedInputError(
                f"inconsistent dataset shapes {inputs.shape}, {targets.shape}, {stamps.shape}"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "timestamps", stamps)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def window(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[2]

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.inputs[index], self.targets[index], self.timestamps[index])

    def save(self, path) -> None:
        n, w, f = self.inputs.shape
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<4q", n, w, f, self.targets.shape[1]))
            fh.write(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.timestamps, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "WindowedDataset":
        raw = Path(path).read_bytes()
        if raw[:5] != DATASET_MAGIC:
            raise RejectedInputError(f"{path}: not an IEQW1 dataset file")
        n, w, f, k = struct.unpack_from("<4q", raw, 5)
        body = np.frombuffer(raw, dtype="<f8", offset=5 + 32)
        expected = n * w * f + n * k + n
        if body.size != expected:
            raise RejectedInputError(f"{path}: expected {expected} floats, found {body.size}")
        inputs = body[: n * w * f].reshape(n, w, f)
        targets = body[n * w * f : n * w * f + n * k].reshape(n, k)
        stamps = body[n * w * f + n * k :].astype(np.int64)
        return cls(inputs.astype(np.float64), targets.astype(np.float64), stamps)


def make_windows(frame: TimeSeriesFrame, segments, scaler: Scaler, window: int = 12,
                 horizon: int = 1, utc_offset_seconds: int = 0) -> WindowedDataset:
    """Slide a ``window``-step input over every segment; target is the 3 channels ``horizon`` steps later."""
    offsets = window_offsets(segments, window, horizon)
    if len(offsets) == 0:
        raise EmptyDatasetError(f"no segment is at least {window + horizon} steps long")
    feats = scaler.transform(feature_matrix(frame, utc_offset_seconds))
    target_rows = offsets + window + horizon - 1
    inputs = feats[offsets[:, None] + np.arange(window)]
    targets = feats[target_rows, :N_TARGETS]
    return WindowedDataset(inputs, targets, frame.timestamps[target_rows])


def chronological_split(dataset: WindowedDataset, fractions=(0.85, 0.075, 0.075)):
    """Contiguous (train, validation, test) slices in time order, without shuffling."""
    if len(dataset) == 0:
        raise RejectedInputError("cannot split an empty dataset")
    n_train, n_val, n_test = split_sizes(len(dataset), fractions)
    if min(n_train, n_val, n_test) == 0:
        raise ConfigError(f"split of {len(dataset)} samples leaves an empty slice "
                          f"({n_train}/{n_val}/{n_test})")
    return (
        dataset.subset(slice(0, n_train)),
        dataset.subset(slice(n_train, n_train + n_val)),
        dataset.subset(slice(n_train + n_val, None)),
    )


@dataclass
class PreparedData:
    train: WindowedDataset
    validation: WindowedDataset
    test: WindowedDataset
    scaler: Scaler
    segments: list
    report: dict


def prepare(frame: TimeSeriesFrame, max_gap_steps: int = 6, min_segment_length: int = 13,
            window: int = 12, horizon: int = 1, fractions=(0.85, 0.075, 0.075),
            utc_offset_seconds: int = 0) -> PreparedData:
    """Run the full preprocessing chain on an ingested frame."""
    if min_segment_length < window + horizon:
        raise ConfigError(f"min_segment_length {min_segment_length} < window + horizon")
    raw_records = len(frame)
    raw_valid = int(frame.valid.sum())
    grid = regularize(frame)
    gaps_before = _runs(~grid.valid)
    filled = interpolate_short_gaps(grid, max_gap_steps)
    gaps_after = _runs(~filled.valid)
    segments = extract_segments(filled, min_segment_length)
    if not segments:
        raise EmptyDatasetError("no continuous segment long enough for a window")
    scaler = fit_scaler(filled, segments, fractions[0], window, horizon)
    dataset = make_windows(filled, segments, scaler, window, horizon, utc_offset_seconds)
    train, val, test = chronological_split(dataset, fractions)
    report = {
        "raw_records": raw_records,
        "raw_valid_records": raw_valid,
        "grid_points": len(grid),
        "gaps_before_interpolation": len(gaps_before),
        "invalid_points_before_interpolation": int((~grid.valid).sum()),
        "gaps_after_interpolation": len(gaps_after),
        "invalid_points_after_interpolation": int((~filled.valid).sum()),
        "segments": [
            {"start": int(filled.timestamps[s.start_index]), "end": int(filled.timestamps[s.end_index]),
             "start_index": s.start_index, "end_index": s.end_index, "length": len(s)}
            for s in segments
        ],
        "samples": len(dataset),
        "train_samples": len(train),
        "validation_samples": len(val),
        "test_samples": len(test),
        "constant_features": scaler.constant_features,
    }
    return PreparedData(train, val, test, scaler, segments, report)
