import csv
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ieqforecast.errors import ConfigError, EmptyDatasetError, RejectedInputError, SchemaError
from ieqforecast.pipeline import (
    CHANNEL_RANGES, CHANNELS, ContinuousSegment, Scaler, TimeSeriesFrame, WindowedDataset,
    chronological_split, encode_cyclical, extract_segments, feature_matrix, fit_scaler, ingest_csv,
    interpolate_short_gaps, make_windows, prepare, regularize, split_sizes,
)
from ieqforecast.synthdata import SynthConfig, generate

T0 = 1704067200  # 2024-01-01T00:00:00Z, a Monday midnight in January


def grid_frame(n, values=None, valid=None, start=T0):
    ts = start + 300 * np.arange(n)
    if values is None:
        values = np.column_stack([np.full(n, 21.0), np.full(n, 500.0), np.full(n, 40.0)])
    return TimeSeriesFrame(ts, values, valid)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# ---------------------------------------------------------------- ingest


def test_ingest_three_rows(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["timestamp", *CHANNELS],
                  [[T0 + 300 * i, 21.0, 450, 40] for i in range(3)])
    frame = ingest_csv(p)
    assert len(frame) == 3 and frame.valid.all()


def test_ingest_blank_cell_is_invalid(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["timestamp", *CHANNELS],
                  [[T0, 21, 450, 40], [T0 + 300, 21, "", 40], [T0 + 600, 21, 460, 41]])
    frame = ingest_csv(p)
    assert frame.valid.tolist() == [True, False, True]
    assert frame.values[1, 0] == 21.0


def test_ingest_schema_map_iso_sort_and_duplicates(tmp_path):
    rows = [
        ["2024-01-01T00:10:00", 22, 500, 41],
        ["2024-01-01T00:00:00Z", 20, 480, 40],
        ["2024-01-01T00:05:00+00:00", 21, 490, 40.5],
        ["2024-01-01T00:05:00", 99, 999, 99],
    ]
    p = write_csv(tmp_path / "b.csv", ["time", "T", "CO2", "RH"], rows)
    frame = ingest_csv(p, {"timestamp": "time", "air_temperature": "T", "indoor_co2": "CO2",
                           "relative_humidity": "RH"})
    assert frame.timestamps.tolist() == [T0, T0 + 300, T0 + 600]
    assert frame.values[:, 0].tolist() == [20.0, 21.0, 22.0]  # first duplicate kept


def test_ingest_missing_column_names_it(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["timestamp", "air_temperature", "relative_humidity"],
                  [[T0, 21, 40]])
    with pytest.raises(SchemaError, match="indoor_co2"):
        ingest_csv(p)


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(RejectedInputError):
        ingest_csv(p)
    write_csv(p, ["timestamp", *CHANNELS], [])
    with pytest.raises(RejectedInputError):
        ingest_csv(p)


def test_ingest_out_of_range_is_invalid(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["timestamp", *CHANNELS],
                  [[T0, 21, 450, 40], [T0 + 300, 21, 450, 140], [T0 + 600, -80, 450, 40]])
    assert ingest_csv(p).valid.tolist() == [True, False, False]


def recount_valid(path):
    """Independent line scan: a record counts if all three cells parse and are in range."""
    count = 0
    with open(path) as fh:
        lines = fh.read().splitlines()[1:]
    for line in lines:
        cells = line.split(",")
        ok = True
        for name, cell in zip(CHANNELS, cells[1:]):
            try:
                v = float(cell)
            except ValueError:
                ok = False
                break
            lo, hi = CHANNEL_RANGES[name]
            ok &= lo <= v <= hi
        count += ok
    return count


def test_ingest_valid_count_matches_line_recount(tmp_path):
    frame, _ = generate(SynthConfig(days=3, gap_rate=4.0, gap_max_steps=12, seed=5))
    path = tmp_path / "room.csv"
    frame.to_csv(path)
    loaded = ingest_csv(path)
    assert int(loaded.valid.sum()) == recount_valid(path)
    assert int(loaded.valid.sum()) < len(loaded)


# ---------------------------------------------------------------- regularize


def test_regularize_on_grid_is_unchanged():
    frame = grid_frame(3)
    out = regularize(frame)
    np.testing.assert_array_equal(out.timestamps, frame.timestamps)
    assert out.valid.all()


def test_regularize_inserts_missing_point():
    frame = TimeSeriesFrame([T0, T0 + 600], [[21, 450, 40], [22, 460, 41]])
    out = regularize(frame)
    assert out.timestamps.tolist() == [T0, T0 + 300, T0 + 600]
    assert out.valid.tolist() == [True, False, True]


def test_regularize_drops_far_points():
    frame = TimeSeriesFrame([T0, T0 + 150, T0 + 290], [[21, 450, 40]] * 3)
    out = regularize(frame)
    assert out.timestamps.tolist() == [T0, T0 + 300]
    assert out.valid.all()


def test_regularize_jittered_gap_count_matches_delta_scan():
    rng = np.random.default_rng(3)
    n = 2000
    keep = np.ones(n, dtype=bool)
    for s in rng.integers(0, n - 20, size=30):
        keep[s : s + rng.integers(1, 15)] = False
    keep[0] = keep[-1] = True
    grid = T0 + 300 * np.arange(n)
    ts = grid[keep] + rng.integers(-45, 46, size=keep.sum())
    frame = TimeSeriesFrame(ts, np.tile([21.0, 450.0, 40.0], (len(ts), 1)))

    # oracle: scan consecutive deltas in grid units
    steps = np.rint(np.diff(ts) / 300).astype(int)
    expected_gaps = int((steps > 1).sum())
    expected_missing = int((steps - 1).sum())

    out = regularize(frame)
    invalid = ~out.valid
    runs = int(np.sum(invalid[1:] & ~invalid[:-1]) + invalid[0])
    assert runs == expected_gaps
    assert int(invalid.sum()) == expected_missing


# ---------------------------------------------------------------- interpolation


def cubic_frame(coefs, n=40, hole=(10, 12)):
    x = np.arange(n, dtype=float)
    vals = np.column_stack([np.polyval(c, x) for c in coefs])
    valid = np.ones(n, dtype=bool)
    valid[hole[0] : hole[1] + 1] = False
    vals_obs = vals.copy()
    vals_obs[~valid] = np.nan
    return TimeSeriesFrame(T0 + 300 * np.arange(n), vals_obs, valid), vals


def test_cubic_hole_is_reproduced():
    coefs = [[1e-3, -0.02, 0.1, 20.0], [0.05, -1.0, 3.0, 600.0], [-1e-3, 0.03, -0.2, 45.0]]
    frame, truth = cubic_frame(coefs)
    out = interpolate_short_gaps(frame)
    assert out.valid.all()
    assert np.max(np.abs(out.values - truth)) < 1e-8


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e-4, 1e-4), min_size=3, max_size=3),  # keeps values physical
    st.integers(2, 30),
    st.integers(1, 6),
)
def test_cubic_hole_property(leading, start, length):
    coefs = [[a, 0.0, 0.5, base] for a, base in zip(leading, (20.0, 800.0, 50.0))]
    frame, truth = cubic_frame(coefs, n=45, hole=(start, start + length - 1))
    out = interpolate_short_gaps(frame, max_gap_steps=6)
    assert np.max(np.abs(out.values - truth)) < 1e-8


def test_long_hole_untouched():
    frame, _ = cubic_frame([[0, 0, 0, 20.0], [0, 0, 0, 500.0], [0, 0, 0, 40.0]], hole=(10, 19))
    out = interpolate_short_gaps(frame, max_gap_steps=6)
    assert not out.valid[10:20].any()
    assert np.isnan(out.values[10:20]).all()


def test_hole_without_two_anchors_untouched():
    valid = np.ones(30, dtype=bool)
    valid[1:3] = False  # only one valid point before
    frame = grid_frame(30, valid=valid)
    assert not interpolate_short_gaps(frame).valid[1:3].any()


def test_cubic_beats_linear_on_sine():
    n = 400
    t = np.arange(n)
    signal = 22 + 3 * np.sin(2 * np.pi * t / 96)
    valid = np.ones(n, dtype=bool)
    holes = np.arange(10, n - 10, 17)
    for h in holes:
        valid[h : h + 2] = False
    vals = np.column_stack([signal, np.full(n, 500.0), np.full(n, 40.0)])
    frame = TimeSeriesFrame(T0 + 300 * t, vals, valid)
    cubic = interpolate_short_gaps(frame).values[:, 0]
    linear = np.interp(t, t[valid], signal[valid])
    missing = ~valid
    assert np.max(np.abs(cubic[missing] - signal[missing])) < np.max(np.abs(linear[missing] - signal[missing]))


def test_partial_channel_observation_kept():
    frame, truth = cubic_frame([[0, 0, 0.1, 20.0], [0, 0, 1.0, 500.0], [0, 0, 0.2, 40.0]], hole=(10, 10))
    vals = frame.values.copy()
    vals[10] = [7.0, np.nan, 33.0]  # temperature and humidity observed, CO2 missing
    out = interpolate_short_gaps(TimeSeriesFrame(frame.timestamps, vals))
    assert out.values[10, 0] == 7.0 and out.values[10, 2] == 33.0
    assert abs(out.values[10, 1] - truth[10, 1]) < 1e-8


# ---------------------------------------------------------------- segments


def test_fully_valid_frame_single_segment():
    assert extract_segments(grid_frame(100), 13) == [ContinuousSegment(0, 99)]


def test_runs_of_20_5_30():
    valid = np.array([True] * 20 + [False] + [True] * 5 + [False] + [True] * 30)
    segs = extract_segments(grid_frame(len(valid), valid=valid), 13)
    assert [(s.start_index, s.end_index) for s in segs] == [(0, 19), (27, 56)]


def test_min_length_guard():
    with pytest.raises(ConfigError):
        extract_segments(grid_frame(20), 12)


def test_segments_follow_injected_gaps():
    frame, log = generate(SynthConfig(days=4, gap_rate=3.0, gap_min_steps=8, gap_max_steps=20, seed=11))
    segs = extract_segments(frame, 13)
    mask = ~log.gap_mask
    expected = []
    i = 0
    while i < len(mask):
        if mask[i]:
            j = i
            while j + 1 < len(mask) and mask[j + 1]:
                j += 1
            if j - i + 1 >= 13:
                expected.append((i, j))
            i = j + 1
        else:
            i += 1
    assert [(s.start_index, s.end_index) for s in segs] == expected
    assert len(expected) > 3


# ---------------------------------------------------------------- cyclical


def test_cyclical_examples():
    np.testing.assert_allclose(encode_cyclical(T0), [0, 1, 0, 1], atol=1e-15)
    six = encode_cyclical(T0 + 6 * 3600)
    assert six[0] == pytest.approx(1.0) and six[1] == pytest.approx(0.0, abs=1e-15)
    july = encode_cyclical(1719792000)  # 2024-07-01T00:00Z
    assert july[2] == pytest.approx(0.0, abs=1e-15) and july[3] == -1.0


def test_cyclical_local_offset():
    # 23:00 UTC is local midnight at UTC+1
    np.testing.assert_allclose(encode_cyclical(T0 - 3600, utc_offset_seconds=3600), [0, 1, 0, 1], atol=1e-12)


@settings(max_examples=300)
@given(st.integers(0, 4_102_444_800))
def test_cyclical_unit_circle(ts):
    d_s, d_c, m_s, m_c = encode_cyclical(ts)
    assert abs(d_s**2 + d_c**2 - 1) < 1e-12
    assert abs(m_s**2 + m_c**2 - 1) < 1e-12


# ---------------------------------------------------------------- scaler


def test_scaler_example():
    vals = np.column_stack([np.resize([18.0, 22.0, 26.0], 30), np.full(30, 500.0), np.linspace(30, 50, 30)])
    frame = grid_frame(30, vals)
    scaler = fit_scaler(frame, [ContinuousSegment(0, 29)], train_fraction=1.0)
    assert scaler.mins[0] == 18 and scaler.maxs[0] == 26
    assert scaler.transform([22.0], slice(0, 1))[0] == 0.5
    assert scaler.transform([30.0], slice(0, 1))[0] == 1.5  # not clipped
    assert scaler.constant_features == ["indoor_co2"]
    assert scaler.transform([500.0], slice(1, 2))[0] == 0.0
    assert scaler.mins[3:].tolist() == [-1] * 4 and scaler.maxs[3:].tolist() == [1] * 4


def test_scaler_round_trip():
    rng = np.random.default_rng(4)
    scaler = Scaler(np.array([15.0, 400.0, 20.0, -1, -1, -1, -1]), np.array([30.0, 2000.0, 70.0, 1, 1, 1, 1]))
    x = rng.uniform(-1000, 3000, size=(1000, 7))
    back = scaler.inverse_transform(scaler.transform(x))
    assert np.max(np.abs(back - x) / np.maximum(np.abs(x), 1e-300)) < 1e-10


def test_scaler_file_round_trip(tmp_path):
    scaler = Scaler(np.array([0.1, 1 / 3, 2.0, -1, -1, -1, -1]), np.array([0.7, 1e3 + 1e-9, 2.0, 1, 1, 1, 1]))
    scaler.save(tmp_path / "s.json")
    back = Scaler.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.mins, scaler.mins)
    np.testing.assert_array_equal(back.maxs, scaler.maxs)


def test_scaler_uses_training_inputs_only():
    base, _ = generate(SynthConfig(days=3, seed=2, gap_rate=0))
    vals = base.values.copy()
    vals[-5, 1] = 3000.0  # extreme inside the test region
    frame = TimeSeriesFrame(base.timestamps, vals)
    segs = extract_segments(frame, 13)
    scaler = fit_scaler(frame, segs)
    ds = make_windows(frame, segs, scaler)
    train, _, test = chronological_split(ds)
    raw_train_inputs = scaler.inverse_transform(train.inputs[..., :3], slice(0, 3)).reshape(-1, 3)
    np.testing.assert_allclose(raw_train_inputs.min(axis=0), scaler.mins[:3], rtol=1e-12)
    np.testing.assert_allclose(raw_train_inputs.max(axis=0), scaler.maxs[:3], rtol=1e-12)
    # and the scaler differs from one fit on all rows, so the guard is doing something
    assert scaler.maxs[1] < 3000.0
    assert test.targets[:, 1].max() > 1.0


# ---------------------------------------------------------------- windows


def identity_scaler():
    return Scaler(np.zeros(7), np.ones(7))


def test_window_counts_simple():
    for n, expected in [(24, 12), (13, 1)]:
        ds = make_windows(grid_frame(n), [ContinuousSegment(0, n - 1)], identity_scaler())
        assert len(ds) == expected
        assert ds.inputs.shape == (expected, 12, 7) and ds.targets.shape == (expected, 3)


def test_no_long_enough_segment():
    with pytest.raises(EmptyDatasetError):
        make_windows(grid_frame(12), [ContinuousSegment(0, 11)], identity_scaler())


def brute_force_samples(frame, segments):
    samples = []
    for s in segments:
        for i in range(s.start_index, s.end_index + 1):
            rows = list(range(i, i + 13))
            if rows[-1] <= s.end_index:
                samples.append(rows)
    return samples


def test_multi_segment_enumeration():
    rng = np.random.default_rng(8)
    n = 600
    valid = rng.uniform(size=n) > 0.03
    vals = np.column_stack([20 + rng.normal(size=n), 500 + 10 * rng.normal(size=n), 40 + rng.normal(size=n)])
    frame = grid_frame(n, vals, valid)
    segs = extract_segments(frame, 13)
    scaler = fit_scaler(frame, segs)
    ds = make_windows(frame, segs, scaler)
    oracle = brute_force_samples(frame, segs)
    assert len(ds) == len(oracle) == sum(max(0, len(s) - 12) for s in segs)
    feats = scaler.transform(feature_matrix(frame))
    for k in rng.integers(0, len(ds), size=25):
        rows = oracle[k]
        np.testing.assert_array_equal(ds.inputs[k], feats[rows[:12]])
        np.testing.assert_array_equal(ds.targets[k], feats[rows[12], :3])
        assert ds.timestamps[k] == frame.timestamps[rows[12]]
    # windows never straddle a gap: the 13 rows are grid-contiguous
    assert np.all(np.diff(ds.timestamps) > 0)


def test_window_timestamps_contiguous():
    frame, log = generate(SynthConfig(days=2, gap_rate=5.0, gap_min_steps=8, gap_max_steps=10, seed=1))
    segs = extract_segments(frame, 13)
    ds = make_windows(frame, segs, fit_scaler(frame, segs))
    pos = np.searchsorted(frame.timestamps, ds.timestamps)
    rows = pos[:, None] - 12 + np.arange(13)
    assert np.all(np.diff(frame.timestamps[rows], axis=1) == 300)
    assert frame.valid[rows].all()


# ---------------------------------------------------------------- split


@pytest.mark.parametrize("n, sizes", [(1000, (850, 75, 75)), (40, (34, 3, 3)), (123789, (105220, 9284, 9285))])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes
    assert sizes[0] == math.floor(0.85 * n) and sizes[1] == math.floor(0.075 * n)


def test_split_ordering():
    n = 40
    ds = WindowedDataset(np.zeros((n, 12, 7)), np.zeros((n, 3)), T0 + 300 * np.arange(n))
    train, val, test = chronological_split(ds)
    assert (len(train), len(val), len(test)) == (34, 3, 3)
    assert train.timestamps.max() < val.timestamps.min() < test.timestamps.min()


def test_split_rejects_empty_slice():
    ds = WindowedDataset(np.zeros((5, 12, 7)), np.zeros((5, 3)), np.arange(5))
    with pytest.raises(ConfigError):
        chronological_split(ds)
    with pytest.raises(ConfigError):
        split_sizes(100, (0.5, 0.3, 0.3))


# ---------------------------------------------------------------- serialization & chain


def test_dataset_binary_layout(tmp_path):
    rng = np.random.default_rng(0)
    ds = WindowedDataset(rng.uniform(size=(4, 12, 7)), rng.uniform(size=(4, 3)), T0 + 300 * np.arange(4))
    path = tmp_path / "d.ieqw"
    ds.save(path)
    raw = path.read_bytes()
    assert raw[:5] == b"IEQW1"
    assert struct.unpack_from("<4q", raw, 5) == (4, 12, 7, 3)
    assert len(raw) == 5 + 32 + 8 * (4 * 12 * 7 + 4 * 3 + 4)
    first = struct.unpack_from("<d", raw, 37)[0]
    assert first == ds.inputs[0, 0, 0]
    back = WindowedDataset.load(path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)
    np.testing.assert_array_equal(back.timestamps, ds.timestamps)


def test_prepare_report_counts():
    frame, _ = generate(SynthConfig(days=5, gap_rate=2.0, gap_min_steps=1, gap_max_steps=12, seed=4))
    prepared = prepare(frame)
    r = prepared.report
    assert r["samples"] == sum(max(0, s["length"] - 12) for s in r["segments"])
    assert r["train_samples"] + r["validation_samples"] + r["test_samples"] == r["samples"]
    assert r["invalid_points_after_interpolation"] <= r["invalid_points_before_interpolation"]


def test_frame_rejects_unsorted():
    with pytest.raises(RejectedInputError):
        TimeSeriesFrame([T0 + 300, T0], [[20, 400, 40]] * 2)
