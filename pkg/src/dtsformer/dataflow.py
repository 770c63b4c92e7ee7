"""Flow series ingestion, synthetic generation, normalization and window sampling."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

STEP = np.timedelta64(30, "m")
TIME_FORMAT = "%Y-%m-%dT%H:%M"
SYNTHETIC_START = np.datetime64("2023-01-12T00:00", "m")
MAX_FILLED_GAP = 2


class ConfigError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class FlowParseError(ValueError):
    """Base class for CSV problems; ``line`` is the 1-based file line."""

    def __init__(self, path, line: int, msg: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


class MalformedRowError(FlowParseError):
    pass


class NonMonotoneTimestampError(FlowParseError):
    pass


class OffGridTimestampError(FlowParseError):
    pass


@dataclass
class FlowSeries:
    """Univariate flow on a 30-minute grid."""

    timestamps: np.ndarray
    values: np.ndarray
    norm: Optional[tuple[float, float]] = None
    drop_fraction: float = 0.0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise ValueError("timestamps and values must be 1-D and equally long")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) != STEP):
            raise ValueError("timestamps must be contiguous at 30-minute spacing")
        if self.norm is not None and not self.norm[1] > 0:
            raise ValueError("normalization std must be positive")

    def __len__(self) -> int:
        return len(self.values)

    def denormalize(self, values=None) -> np.ndarray:
        v = self.values if values is None else np.asarray(values, dtype=np.float64)
        if self.norm is None:
            return v.copy()
        mu, sigma = self.norm
        return v * sigma + mu


# --------------------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    length: int = 4096
    base_period: int = 48
    regime_count: int = 3
    spike_rate: float = 1.0
    spike_magnitude: float = 3.0
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.base_period < 2:
            raise ConfigError("base_period must be at least 2")
        if self.length < 4 * self.base_period:
            raise ConfigError(
                f"length must be >= 4*base_period ({4 * self.base_period}), got {self.length}"
            )
        if self.regime_count < 1:
            raise ConfigError("regime_count must be at least 1")
        for name in ("spike_rate", "spike_magnitude", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SyntheticConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown synthetic key: {key}")
            kwargs[key] = _coerce(raw, known[key].type, key)
        return cls(**kwargs).validate()

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw, typ, key):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def daily_profile(period: int) -> np.ndarray:
    """One period of a positive two-peak profile with a deep night trough, peak value 1."""
    hour = 24.0 * np.arange(period) / period
    shape = (
        0.25
        + 0.75 * np.exp(-0.5 * ((hour - 10.0) / 3.0) ** 2)
        + 0.55 * np.exp(-0.5 * ((hour - 17.0) / 2.5) ** 2)
    )
    return shape / shape.max()


def synthetic_components(cfg: SyntheticConfig) -> dict[str, np.ndarray]:
    """Additive pieces of the synthetic series (before the clip at zero)."""
    cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    regime_rng, spike_rng, noise_rng = (np.random.default_rng(s) for s in streams)

    level, amp = 400.0, 800.0
    t = np.arange(cfg.length)
    periods = math.ceil(cfg.length / cfg.base_period)
    base = level + amp * np.tile(daily_profile(cfg.base_period), periods)[: cfg.length]

    trend = np.zeros(cfg.length)
    n_bounds = min(cfg.regime_count - 1, periods - 1)
    cuts = np.sort(regime_rng.choice(np.arange(1, periods), size=n_bounds, replace=False))
    edges = [0, *(int(c) * cfg.base_period for c in cuts), cfg.length]
    for start, stop in zip(edges[:-1], edges[1:]):
        offset = regime_rng.uniform(-0.2, 0.2) * amp
        # drift over the regime stays within +-15% of the amplitude
        slope = regime_rng.uniform(-0.15, 0.15) * amp / max(stop - start, 1)
        trend[start:stop] = offset + slope * (t[start:stop] - start)

    clean = base + trend
    noise = noise_rng.normal(0.0, cfg.noise_std * amp, size=cfg.length) if cfg.noise_std > 0 else np.zeros(cfg.length)

    spikes = np.zeros(cfg.length)
    if cfg.spike_rate > 0 and cfg.spike_magnitude > 0:
        count = spike_rng.poisson(cfg.spike_rate * cfg.length / cfg.base_period)
        where = spike_rng.integers(0, cfg.length, size=count)
        heights = spike_rng.uniform(0.75, 1.25, size=count) * cfg.spike_magnitude * clean.std()
        np.add.at(spikes, where, heights)
    return {"base": base, "trend": trend, "spikes": spikes, "noise": noise}


def generate_synthetic(cfg: SyntheticConfig) -> FlowSeries:
    """Periodic base wave + regime trends + Poisson spikes + Gaussian noise, clipped at 0."""
    parts = synthetic_components(cfg)
    values = np.clip(sum(parts.values()), 0.0, None)
    stamps = SYNTHETIC_START + STEP * np.arange(cfg.length)
    return FlowSeries(stamps, values)


# --------------------------------------------------------------------------- csv


def write_csv(series: FlowSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp,count\n")
        for ts, v in zip(series.timestamps, series.values):
            fh.write(f"{_fmt_ts(ts)},{v:.6f}\n")


def _fmt_ts(ts: np.datetime64) -> str:
    return str(ts.astype("datetime64[m]"))


def load_csv(path) -> FlowSeries:
    """Read ``timestamp,count`` rows, fill gaps of <= 2 intervals, keep the longest segment."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    stamps: list[np.datetime64] = []
    counts: list[float] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "count"]:
            raise MalformedRowError(path, 1, "expected header 'timestamp,count'")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedRowError(path, line, f"expected 2 fields, got {len(row)}")
            try:
                ts = np.datetime64(datetime.strptime(row[0].strip(), TIME_FORMAT), "m")
            except ValueError as exc:
                raise MalformedRowError(path, line, f"bad timestamp {row[0]!r}") from exc
            try:
                value = float(row[1])
            except ValueError as exc:
                raise MalformedRowError(path, line, f"bad count {row[1]!r}") from exc
            if not math.isfinite(value) or value < 0:
                raise MalformedRowError(path, line, f"count must be a non-negative number, got {row[1]!r}")
            if stamps:
                delta = ts - stamps[-1]
                if delta <= np.timedelta64(0, "m"):
                    raise NonMonotoneTimestampError(path, line, f"timestamp {row[0]} does not increase")
                if delta % STEP != np.timedelta64(0, "m"):
                    raise OffGridTimestampError(path, line, f"timestamp {row[0]} is off the 30-minute grid")
            stamps.append(ts)
            counts.append(value)
    if not stamps:
        raise InsufficientDataError(f"{path}: no data rows")

    # each segment: [timestamps, values, number of observed rows]
    segments = [[[stamps[0]], [counts[0]], 1]]
    for ts, v in zip(stamps[1:], counts[1:]):
        seg = segments[-1]
        prev_ts, prev_v = seg[0][-1], seg[1][-1]
        missing = int((ts - prev_ts) // STEP) - 1
        if missing > MAX_FILLED_GAP:
            segments.append([[ts], [v], 1])
            continue
        for i in range(1, missing + 1):
            seg[0].append(prev_ts + i * STEP)
            seg[1].append(prev_v + i / (missing + 1) * (v - prev_v))
        seg[0].append(ts)
        seg[1].append(v)
        seg[2] += 1

    best = max(segments, key=lambda s: len(s[0]))
    drop = 1.0 - best[2] / len(stamps)
    if drop > 0:
        log.info("kept longest of %d segments, dropped %.1f%% of rows", len(segments), 100 * drop)
    return FlowSeries(np.array(best[0]), np.array(best[1], dtype=np.float64), drop_fraction=drop)


# --------------------------------------------------------------------------- normalization


class ZScoreScaler(TransformerMixin, BaseEstimator):
    """Z-score fitted on the leading ``train_fraction`` of a 1-D series (population std)."""

    def __init__(self, train_fraction: float = 1.0):
        self.train_fraction = train_fraction

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64).reshape(-1)
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")
        cut = max(1, int(math.floor(self.train_fraction * len(x))))
        head = x[:cut]
        sigma = float(head.std())
        if not sigma > 0:
            raise DegenerateDataError("training portion has zero variance")
        self.mean_ = float(head.mean())
        self.scale_ = sigma
        self.n_train_ = cut
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_


def zscore_fit_apply(series: FlowSeries, train_fraction: float) -> FlowSeries:
    scaler = ZScoreScaler(train_fraction).fit(series.values)
    return FlowSeries(
        series.timestamps.copy(),
        scaler.transform(series.values),
        norm=(scaler.mean_, scaler.scale_),
        drop_fraction=series.drop_fraction,
    )


# --------------------------------------------------------------------------- calendar


def calendar_features(timestamp) -> tuple[int, int, int, int]:
    """(hour, weekday, day, month) for the 30-minute interval starting at ``timestamp``.

    The hour is the one the interval ends in, capped at 23 so the last interval
    of a day stays on that day. Weekday is 1 for Monday through 7 for Sunday.
    """
    if isinstance(timestamp, np.datetime64):
        timestamp = timestamp.astype("datetime64[m]").astype(datetime)
    hour = min(23, timestamp.hour + (1 if timestamp.minute > 0 else 0))
    return hour, timestamp.isoweekday(), timestamp.day, timestamp.month


def calendar_matrix(timestamps: np.ndarray) -> np.ndarray:
    """Vectorized ``calendar_features`` over an array of instants, shape (N, 4)."""
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    days = ts.astype("datetime64[D]")
    minutes = (ts - days).astype(np.int64)
    hour = np.minimum(23, minutes // 60 + (minutes % 60 > 0))
    weekday = (days.astype(np.int64) + 3) % 7 + 1  # 1970-01-01 was a Thursday
    months = days.astype("datetime64[M]")
    day = (days - months).astype(np.int64) + 1
    month = months.astype(np.int64) % 12 + 1
    return np.stack([hour, weekday, day, month], axis=1).astype(np.int64)


# --------------------------------------------------------------------------- windows


@dataclass
class WindowSample:
    history: np.ndarray
    target: np.ndarray
    history_calendar: np.ndarray


@dataclass
class WindowSet:
    """Stacked samples; ``anchors[i]`` is the series index of the first target step."""

    history: np.ndarray
    target: np.ndarray
    calendar: Optional[np.ndarray]  # None leaves the temporal embedding out
    anchors: np.ndarray
    timestamps: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i) -> WindowSample:
        cal = None if self.calendar is None else self.calendar[i]
        return WindowSample(self.history[i], self.target[i], cal)

    def __iter__(self) -> Iterator[WindowSample]:
        return (self[i] for i in range(len(self)))

    @property
    def m(self) -> int:
        return self.history.shape[1]

    @property
    def n(self) -> int:
        return self.target.shape[1]

    def subset(self, idx) -> "WindowSet":
        cal = None if self.calendar is None else self.calendar[idx]
        return WindowSet(self.history[idx], self.target[idx], cal, self.anchors[idx], self.timestamps)

    def input_span(self) -> tuple[int, int]:
        return int(self.anchors.min()) - self.m, int(self.anchors.max()) - 1

    def target_span(self) -> tuple[int, int]:
        return int(self.anchors.min()), int(self.anchors.max()) + self.n - 1


def split_counts(total: int, splits: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Floor the train and validation shares, give the remainder to test."""
    if len(splits) != 3 or any(s < 0 for s in splits) or abs(sum(splits) - 1.0) > 1e-9:
        raise ConfigError(f"splits must be three non-negative fractions summing to 1, got {splits}")
    n_train = int(math.floor(splits[0] * total + 1e-9))
    n_val = int(math.floor(splits[1] * total + 1e-9))
    return n_train, n_val, total - n_train - n_val


def make_windows(series: FlowSeries, m: int, n: int, splits: Sequence[float] = (0.7, 0.1, 0.2)):
    """Stride-1 windows split chronologically into (train, val, test) without leakage.

    Anchors are allotted to the three splits by ``split_counts``; afterwards the
    first ``m + n - 1`` anchors of validation and test are purged so no window
    of a later split touches a target step of an earlier one.
    """
    if m < 1 or n < 1:
        raise ConfigError("m and n must be positive")
    if not (m <= 24 and n <= 48):
        log.debug("m=%d, n=%d lie outside the 12h/24h ranges used for the airport data", m, n)
    L = len(series)
    if m + n > L:
        raise InsufficientDataError(f"series of length {L} is too short for m={m}, n={n}")
    anchors = np.arange(m, L - n + 1)
    values = series.values
    calendar = calendar_matrix(series.timestamps)
    gather_h = anchors[:, None] + np.arange(-m, 0)[None, :]
    gather_t = anchors[:, None] + np.arange(n)[None, :]
    full = WindowSet(values[gather_h], values[gather_t], calendar[gather_h], anchors, series.timestamps)

    n_train, n_val, _ = split_counts(len(anchors), splits)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, len(anchors))]
    parts = []
    last_target = None
    for lo, hi in bounds:
        idx = np.arange(lo, hi)
        if last_target is not None:
            idx = idx[anchors[idx] - m > last_target]
        part = full.subset(idx)
        if len(idx):
            last_target = int(anchors[idx[-1]]) + n - 1
        parts.append(part)
    return tuple(parts)


def leakage_free(train: WindowSet, val: WindowSet, test: WindowSet) -> bool:
    """True when every earlier-split target step precedes every later-split input step."""
    ordered = [s for s in (train, val, test) if len(s)]
    for early, late in zip(ordered[:-1], ordered[1:]):
        if early.target_span()[1] >= late.input_span()[0]:
            return False
    return True
