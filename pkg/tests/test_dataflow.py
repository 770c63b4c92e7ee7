import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsformer.dataflow import (
    ConfigError,
    DegenerateDataError,
    FlowSeries,
    InsufficientDataError,
    MalformedRowError,
    NonMonotoneTimestampError,
    OffGridTimestampError,
    SyntheticConfig,
    ZScoreScaler,
    calendar_features,
    calendar_matrix,
    generate_synthetic,
    leakage_free,
    load_csv,
    make_windows,
    split_counts,
    synthetic_components,
    write_csv,
    zscore_fit_apply,
)
from dtsformer.evalbench import dominant_period

T0 = np.datetime64("2024-01-01T00:00", "m")
STEP = np.timedelta64(30, "m")


def series(values, start=T0):
    values = np.asarray(values, dtype=float)
    return FlowSeries(start + STEP * np.arange(len(values)), values)


def write_rows(path, rows, header="timestamp,count"):
    path.write_text(header + "\n" + "".join(f"{ts},{v}\n" for ts, v in rows), encoding="utf-8")
    return path


def grid(n, start=datetime(2024, 1, 1)):
    return [str(np.datetime64(start, "m") + STEP * i) for i in range(n)]


# ---------------------------------------------------------------- synthetic generation


def test_noise_free_single_regime_has_base_period():
    for p in (24, 48, 96):
        cfg = SyntheticConfig(length=10 * p, base_period=p, regime_count=1, spike_rate=0, noise_std=0, seed=3)
        assert dominant_period(generate_synthetic(cfg).values) == p


def test_synthetic_deterministic():
    cfg = SyntheticConfig(length=1000, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.timestamps, b.timestamps)
    assert not np.array_equal(a.values, generate_synthetic(SyntheticConfig(length=1000, seed=12)).values)


def test_spikes_exceed_spike_free_band():
    spiky = SyntheticConfig(length=2000, spike_rate=2, spike_magnitude=5, seed=4)
    calm = SyntheticConfig(length=2000, spike_rate=0, spike_magnitude=5, seed=4)
    clean = generate_synthetic(calm).values
    assert generate_synthetic(spiky).values.max() > clean.mean() + 3 * clean.std()


def test_noise_free_periodic_within_regime():
    cfg = SyntheticConfig(length=960, base_period=48, regime_count=3, spike_rate=0, noise_std=0, seed=5)
    parts = synthetic_components(cfg)
    x = generate_synthetic(cfg).values
    detrended = x - parts["trend"]
    assert np.abs(detrended[48:] - detrended[:-48]).max() < 1e-12


def test_regime_boundaries_on_period_multiples():
    cfg = SyntheticConfig(length=960, base_period=48, regime_count=4, spike_rate=0, noise_std=0, seed=6)
    trend = synthetic_components(cfg)["trend"]
    jumps = np.flatnonzero(np.abs(np.diff(np.diff(trend))) > 1e-9) + 1
    starts = {int(j) for j in jumps if j % 48 == 0}
    assert len(starts) == 3


def test_synthetic_nonnegative_and_gridded():
    s = generate_synthetic(SyntheticConfig(length=500, noise_std=0.5, seed=7))
    assert (s.values >= 0).all()
    assert np.all(np.diff(s.timestamps) == STEP)


@pytest.mark.parametrize("kw", [{"length": 100}, {"base_period": 1}, {"regime_count": 0},
                                {"spike_rate": -1}, {"noise_std": -0.1}])
def test_synthetic_config_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticConfig(**kw).validate()


def test_synthetic_config_error_names_constraint():
    with pytest.raises(ConfigError, match="4\\*base_period"):
        SyntheticConfig(length=100, base_period=48).validate()


def test_synthetic_from_mapping():
    cfg = SyntheticConfig.from_mapping({"length": "400", "noise_std": "0.1"})
    assert cfg.length == 400 and cfg.noise_std == 0.1
    with pytest.raises(ConfigError):
        SyntheticConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError):
        SyntheticConfig.from_mapping({"length": "many"})


# ---------------------------------------------------------------- csv


def test_load_four_rows(tmp_path):
    path = write_rows(tmp_path / "a.csv", zip(grid(4), [1, 2, 3, 4]))
    s = load_csv(path)
    assert len(s) == 4 and s.drop_fraction == 0.0
    assert s.values.tolist() == [1, 2, 3, 4]


def test_single_gap_interpolated(tmp_path):
    stamps = grid(3)
    path = write_rows(tmp_path / "a.csv", [(stamps[0], 10), (stamps[2], 20)])
    s = load_csv(path)
    assert s.values.tolist() == [10.0, 15.0, 20.0]
    assert s.drop_fraction == 0.0


def test_two_interval_gap_interpolated(tmp_path):
    stamps = grid(4)
    s = load_csv(write_rows(tmp_path / "a.csv", [(stamps[0], 0), (stamps[3], 30)]))
    assert s.values.tolist() == [0.0, 10.0, 20.0, 30.0]


def test_long_hole_keeps_longest_segment(tmp_path):
    stamps = grid(105)
    # rows 0..59 present, 5 missing intervals, then 40 rows
    keep = list(range(60)) + list(range(65, 105))
    rows = [(stamps[i], i) for i in keep]
    s = load_csv(write_rows(tmp_path / "a.csv", rows))
    assert len(s) == 60
    assert s.values[0] == 0 and s.values[-1] == 59
    assert s.drop_fraction == pytest.approx(40 / 100)


def test_csv_round_trip(tmp_path):
    s = generate_synthetic(SyntheticConfig(length=300, seed=1))
    write_csv(s, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    assert np.array_equal(back.timestamps, s.timestamps)
    assert np.abs(back.values - s.values).max() <= 5e-7


@pytest.mark.parametrize("rows,err,line", [
    ([("2024-01-01T00:00", 1), ("2024-01-01T00:30", "x")], MalformedRowError, 3),
    ([("2024-01-01T00:00", 1), ("yesterday", 2)], MalformedRowError, 3),
    ([("2024-01-01T00:00", 1), ("2024-01-01T00:30", -2)], MalformedRowError, 3),
    ([("2024-01-01T00:30", 1), ("2024-01-01T00:00", 2)], NonMonotoneTimestampError, 3),
    ([("2024-01-01T00:00", 1), ("2024-01-01T00:45", 2)], OffGridTimestampError, 3),
])
def test_parse_errors_name_the_line(tmp_path, rows, err, line):
    path = write_rows(tmp_path / "bad.csv", rows)
    with pytest.raises(err) as info:
        load_csv(path)
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


def test_bad_header_and_missing_file(tmp_path):
    with pytest.raises(MalformedRowError):
        load_csv(write_rows(tmp_path / "h.csv", [], header="time,value"))
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(InsufficientDataError):
        load_csv(write_rows(tmp_path / "e.csv", []))


def test_distinct_error_classes():
    assert len({MalformedRowError, NonMonotoneTimestampError, OffGridTimestampError}) == 3
    assert not issubclass(MalformedRowError, NonMonotoneTimestampError)


# ---------------------------------------------------------------- z-score


def test_zscore_hand_values():
    z = zscore_fit_apply(series([1, 2, 3]), 1.0)
    assert z.norm[0] == 2.0
    assert z.norm[1] == pytest.approx(0.816496580927726, abs=1e-12)
    np.testing.assert_allclose(z.values, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_zscore_constant_rejected():
    with pytest.raises(DegenerateDataError):
        zscore_fit_apply(series([4, 4, 4, 4]), 1.0)


def test_zscore_fit_on_training_portion_only():
    values = np.r_[np.arange(70.0), 1e6 * np.ones(30)]
    z = zscore_fit_apply(series(values), 0.7)
    assert z.norm[0] == pytest.approx(np.arange(70.0).mean())
    np.testing.assert_allclose(z.values[:70].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.values[:70].std(), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 200), st.integers(0, 9999))
def test_zscore_round_trip(n, seed):
    x = np.random.default_rng(seed).gamma(2.0, 50.0, size=n)
    z = zscore_fit_apply(series(x), 1.0)
    assert np.abs(z.denormalize() - x).max() < 1e-12 * max(1.0, np.abs(x).max())


def test_scaler_estimator_api():
    sc = ZScoreScaler(train_fraction=0.5)
    assert sc.get_params() == {"train_fraction": 0.5}
    x = np.arange(10.0)
    out = sc.fit_transform(x)
    assert sc.mean_ == 2.0 and sc.n_train_ == 5
    np.testing.assert_allclose(sc.inverse_transform(out), x)
    with pytest.raises(ValueError):
        ZScoreScaler(train_fraction=0).fit(x)


# ---------------------------------------------------------------- calendar


def test_calendar_half_past_example():
    assert calendar_features(datetime(2024, 3, 15, 14, 30)) == (15, 5, 15, 3)


def test_calendar_minimum_fields():
    assert calendar_features(datetime(2024, 1, 1, 0, 0)) == (0, 1, 1, 1)


def test_calendar_last_interval_of_year():
    assert calendar_features(datetime(2023, 12, 31, 23, 30)) == (23, 7, 31, 12)


def test_calendar_matrix_matches_scalar():
    stamps = np.datetime64("2023-02-25T00:00") + STEP * np.arange(24 * 48)
    mat = calendar_matrix(stamps)
    for i in range(0, len(stamps), 7):
        assert tuple(mat[i]) == calendar_features(stamps[i])


# ---------------------------------------------------------------- windows


def test_window_count_and_anchors():
    tr, va, te = make_windows(series(np.arange(100.0)), 10, 5, (1.0, 0.0, 0.0))
    assert len(tr) == 86 and len(va) == 0 and len(te) == 0
    assert tr.anchors[0] == 10 and tr.anchors[-1] == 95


def test_split_counts_floor_then_remainder():
    assert split_counts(86) == (60, 8, 18)
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_minimal_series_gives_one_sample():
    tr, va, te = make_windows(series(np.arange(15.0)), 10, 5, (1.0, 0.0, 0.0))
    assert len(tr) == 1
    with pytest.raises(InsufficientDataError):
        make_windows(series(np.arange(14.0)), 10, 5)


def test_windows_are_contiguous_slices():
    x = np.arange(200.0) * 3
    tr, va, te = make_windows(series(x), 12, 4)
    for ws in (tr, va, te):
        for i in range(0, len(ws), 5):
            a = ws.anchors[i]
            assert np.array_equal(ws.history[i], x[a - 12:a])
            assert np.array_equal(ws.target[i], x[a:a + 4])
            assert np.array_equal(ws.calendar[i], calendar_matrix(ws.timestamps[a - 12:a]))


def test_split_sizes_before_purge():
    tr, va, te = make_windows(series(np.arange(100.0)), 10, 5)
    assert len(tr) == 60
    # train anchors 10..69 have targets up to step 73; a later window may only
    # start its history after that, i.e. anchor >= 84. Validation (70..77) is
    # purged entirely, test (78..95) keeps 84..95.
    assert len(va) == 0
    assert te.anchors.tolist() == list(range(84, 96))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 48), st.integers(0, 400),
       st.floats(0.3, 0.8), st.floats(0.05, 0.3))
def test_leakage_invariant_random_configs(m, n, extra, p_train, p_val):
    L = m + n + extra + 20
    s = series(np.arange(float(L)))
    splits = (p_train, p_val, 1.0 - p_train - p_val)
    if splits[2] < 0:
        return
    tr, va, te = make_windows(s, m, n, splits)
    assert leakage_free(tr, va, te)
    train_targets = set((tr.anchors[:, None] + np.arange(n)).ravel().tolist()) if len(tr) else set()
    for later in (va, te):
        if len(later):
            inputs = set((later.anchors[:, None] + np.arange(-m, 0)).ravel().tolist())
            assert not inputs & train_targets


def test_leakage_detector_flags_overlap():
    s = series(np.arange(100.0))
    tr, va, te = make_windows(s, 5, 3, (0.6, 0.2, 0.2))
    leaky_val = tr.subset(np.arange(len(tr) - 3, len(tr)))
    assert not leakage_free(tr, leaky_val, te)
