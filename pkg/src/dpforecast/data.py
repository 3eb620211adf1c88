"""Mobility series ingestion, IQR cleaning, features, windowing, scaling.

The raw input is a CSV of per-region user counts on a 30-minute grid:

    datetime,R1,R2,R3,R4,R5,R6
    2020-08-24 00:00:00,99154,12813,...

Timestamps are ``YYYY-MM-DD HH:MM:SS``; counts are nonnegative integers.
Missing rows become gaps that the IQR cleaning step fills with the mean of
the in-fence values for the same (ISO week, region, time-of-day slot)
group. Supervised windows pair ``lag`` consecutive feature rows (region
counts plus four cyclical time features) with the next slot's counts.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .privacy import PrivacyRecord

logger = logging.getLogger(__name__)

SLOT_SECONDS = 1800
SLOTS_PER_DAY = 48
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
CYCLICAL_NAMES = ("day_sin", "day_cos", "week_sin", "week_cos")

MINUTES_PER_DAY = 1440.0
MINUTES_PER_WEEK = 10080.0


class DataFormatError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class MobilitySeries:
    """Timestamped matrix of per-region user counts on a 30-minute grid.

    ``counts`` has one row per slot and one column per region; gaps are
    NaN until cleaned. ``privacy`` is set when (and only when) the counts
    were released through a sanitizing mechanism.
    """

    timestamps: np.ndarray  # datetime64[s], shape (n_slots,)
    counts: np.ndarray      # float64, shape (n_slots, n_regions)
    region_labels: tuple[str, ...]
    privacy: Optional["PrivacyRecord"] = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        counts = np.asanyarray(self.counts)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 2 or counts.shape[0] != ts.shape[0]:
            raise DataFormatError(
                f"counts shape {counts.shape} inconsistent with {ts.shape[0]} timestamps"
            )
        if counts.shape[1] != len(self.region_labels):
            raise DataFormatError("region label count does not match count columns")
        if ts.shape[0] > 1:
            deltas = np.diff(ts).astype("timedelta64[s]").astype(np.int64)
            if np.any(deltas <= 0):
                raise DataFormatError("timestamps must be strictly increasing")
            if np.any(deltas != SLOT_SECONDS):
                raise DataFormatError("timestamps must sit on a 30-minute grid")

    @property
    def n_slots(self) -> int:
        return self.timestamps.shape[0]

    @property
    def n_regions(self) -> int:
        return self.counts.shape[1]

    @property
    def is_sanitized(self) -> bool:
        return self.privacy is not None


def load_csv(path) -> MobilitySeries:
    """Parse a mobility CSV; missing 30-minute rows stay as NaN gaps."""
    rows: list[tuple[np.datetime64, list[float]]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if not header or header[0].strip() != "datetime" or len(header) < 2:
            raise DataFormatError(
                f"{path}: header must be 'datetime' followed by region columns"
            )
        labels = tuple(h.strip() for h in header[1:])
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(labels) + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {len(labels) + 1} fields")
            try:
                ts = datetime.strptime(row[0].strip(), TIME_FORMAT)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: bad timestamp {row[0]!r}"
                ) from None
            try:
                values = [int(v.strip()) for v in row[1:]]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer count") from None
            if any(v < 0 for v in values):
                raise DataFormatError(f"{path}:{lineno}: negative count")
            rows.append((np.datetime64(ts, "s"), [float(v) for v in values]))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")

    stamps = [r[0] for r in rows]
    for prev, cur in zip(stamps, stamps[1:]):
        if cur == prev:
            raise DataFormatError(f"{path}: duplicated timestamp {prev}")
        if cur < prev:
            raise DataFormatError(f"{path}: timestamps out of order at {cur}")

    first, last = stamps[0], stamps[-1]
    span = int((last - first).astype("timedelta64[s]").astype(np.int64))
    if span % SLOT_SECONDS != 0:
        raise DataFormatError(f"{path}: timestamps not aligned to the 30-minute grid")
    n = span // SLOT_SECONDS + 1
    grid = first + np.arange(n) * np.timedelta64(SLOT_SECONDS, "s")
    counts = np.full((n, len(labels)), np.nan)
    for ts, values in rows:
        offset = int((ts - first).astype("timedelta64[s]").astype(np.int64))
        if offset % SLOT_SECONDS != 0:
            raise DataFormatError(f"{path}: timestamp {ts} off the 30-minute grid")
        counts[offset // SLOT_SECONDS] = values
    return MobilitySeries(grid, counts, labels)


def _slot_of_day(timestamps: np.ndarray) -> np.ndarray:
    secs = timestamps.astype("datetime64[s]").astype(np.int64)
    return (secs % 86400) // SLOT_SECONDS


def _iso_week_keys(timestamps: np.ndarray) -> list[tuple[int, int]]:
    keys = []
    for ts in timestamps.astype("datetime64[s]").tolist():
        iso = ts.isocalendar()
        keys.append((iso[0], iso[1]))
    return keys


def iqr_clean(series: MobilitySeries) -> MobilitySeries:
    """Replace outliers and fill gaps using interquartile-range fences.

    Values are grouped by (ISO week, region, time-of-day slot). Within a
    group, quartiles come from linear interpolation on the sorted present
    values; entries outside [Q1 - 1.5*IQR, Q3 + 1.5*IQR] and missing slots
    are replaced by the mean of the group's in-fence values. Groups with
    fewer than two in-fence values fall back to the region's weekly mean.
    """
    counts = np.array(series.counts, dtype=np.float64)
    slots = _slot_of_day(series.timestamps)
    weeks = _iso_week_keys(series.timestamps)

    week_index: dict[tuple[int, int], list[int]] = {}
    for idx, wk in enumerate(weeks):
        week_index.setdefault(wk, []).append(idx)

    for region in range(series.n_regions):
        col = counts[:, region]
        weekly_mean: dict[tuple[int, int], float] = {}
        for wk, idxs in week_index.items():
            vals = col[idxs]
            present = vals[~np.isnan(vals)]
            weekly_mean[wk] = float(present.mean()) if present.size else math.nan
        region_mean = float(np.nanmean(col)) if not np.all(np.isnan(col)) else 0.0

        groups: dict[tuple[tuple[int, int], int], list[int]] = {}
        for idx, (wk, slot) in enumerate(zip(weeks, slots)):
            groups.setdefault((wk, int(slot)), []).append(idx)

        for (wk, slot), idxs in groups.items():
            vals = col[np.asarray(idxs)]
            present_mask = ~np.isnan(vals)
            present = vals[present_mask]
            replacement = None
            outlier_mask = np.zeros(len(idxs), dtype=bool)
            if present.size >= 2:
                q1, q3 = np.percentile(present, [25.0, 75.0])
                iqr = q3 - q1
                lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
                in_fence = present[(present >= lo) & (present <= hi)]
                outlier_mask = present_mask & ((vals < lo) | (vals > hi))
                if in_fence.size >= 2:
                    replacement = float(in_fence.mean())
            if replacement is None:
                replacement = weekly_mean[wk]
                if math.isnan(replacement):
                    replacement = region_mean
                logger.warning(
                    "group week=%s slot=%d region=%s has <2 usable values; "
                    "falling back to weekly mean", wk, slot,
                    series.region_labels[region],
                )
            needs = outlier_mask | ~present_mask
            if needs.any():
                col[np.asarray(idxs)[needs]] = replacement
        counts[:, region] = col
    return MobilitySeries(series.timestamps, counts, series.region_labels, series.privacy)


def cyclical_features(ts) -> np.ndarray:
    """[sin, cos] pairs for the daily and weekly phase of a timestamp.

    Phase zero is midnight for the day pair and Monday 00:00 for the week
    pair, so ``cyclical_features(ts) == cyclical_features(ts + 7 days)``.
    """
    if isinstance(ts, np.datetime64):
        ts = ts.astype("datetime64[s]").tolist()
    minutes_day = ts.hour * 60 + ts.minute + ts.second / 60.0
    minutes_week = ts.weekday() * MINUTES_PER_DAY + minutes_day
    day_phase = 2.0 * math.pi * minutes_day / MINUTES_PER_DAY
    week_phase = 2.0 * math.pi * minutes_week / MINUTES_PER_WEEK
    return np.array(
        [math.sin(day_phase), math.cos(day_phase),
         math.sin(week_phase), math.cos(week_phase)]
    )


def cyclical_matrix(timestamps: np.ndarray) -> np.ndarray:
    """Vectorized :func:`cyclical_features` over a timestamp array."""
    secs = np.asarray(timestamps, dtype="datetime64[s]").astype(np.int64)
    minutes_day = (secs % 86400) / 60.0
    days = secs // 86400
    weekday = (days + 3) % 7  # the epoch, 1970-01-01, was a Thursday
    minutes_week = weekday * MINUTES_PER_DAY + minutes_day
    day_phase = 2.0 * np.pi * minutes_day / MINUTES_PER_DAY
    week_phase = 2.0 * np.pi * minutes_week / MINUTES_PER_WEEK
    return np.column_stack(
        [np.sin(day_phase), np.cos(day_phase), np.sin(week_phase), np.cos(week_phase)]
    )


def split(
    series: MobilitySeries, train_days: int = 65, test_days: int = 7
) -> tuple[MobilitySeries, MobilitySeries]:
    """Contiguous train/test split over the final ``train+test`` days."""
    need = (train_days + test_days) * SLOTS_PER_DAY
    if series.n_slots < need:
        raise ValueError(
            f"series has {series.n_slots} slots; "
            f"{need} required for {train_days}+{test_days} days"
        )
    start = series.n_slots - need
    cut = start + train_days * SLOTS_PER_DAY
    train = MobilitySeries(
        series.timestamps[start:cut], series.counts[start:cut],
        series.region_labels, series.privacy,
    )
    test = MobilitySeries(
        series.timestamps[cut:], series.counts[cut:],
        series.region_labels, series.privacy,
    )
    return train, test


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised pairs of lag-step feature windows and next-slot targets.

    ``inputs`` is (n, lag, d) with d = regions + 4 cyclical columns (region
    columns first); ``targets`` is (n, regions), the counts of the slot
    immediately after each window.
    """

    inputs: np.ndarray
    targets: np.ndarray
    lag: int
    feature_names: tuple[str, ...]
    target_timestamps: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.ndim != 2:
            raise ValueError("inputs must be (n, lag, d) and targets (n, regions)")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on sample count")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_regions(self) -> int:
        return self.targets.shape[1]


def feature_matrix(series: MobilitySeries) -> np.ndarray:
    """Per-slot feature rows: region counts then cyclical time columns."""
    return np.hstack([series.counts, cyclical_matrix(series.timestamps)])


def make_windows(
    series: MobilitySeries, lag: int = 6, context: MobilitySeries | None = None
) -> WindowedDataset:
    """Build supervised windows; ``context`` supplies the first lag steps.

    Without context the first ``lag`` slots only serve as inputs, giving
    ``n_slots - lag`` samples. With a context series (whose last slot must
    immediately precede ``series``) every slot becomes a target.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    feats = feature_matrix(series)
    if context is not None:
        if context.region_labels != series.region_labels:
            raise ValueError("context and series disagree on regions")
        gap = (series.timestamps[0] - context.timestamps[-1]).astype("timedelta64[s]")
        if int(gap.astype(np.int64)) != SLOT_SECONDS:
            raise ValueError("context must end exactly one slot before the series")
        if context.n_slots < lag:
            raise ValueError(f"context provides {context.n_slots} slots; lag={lag} needed")
        full = np.vstack([feature_matrix(context)[-lag:], feats])
        n = series.n_slots
        targets = series.counts
        target_ts = series.timestamps
    else:
        if series.n_slots < lag + 1:
            raise ValueError(
                f"series has {series.n_slots} slots; at least {lag + 1} required"
            )
        full = feats
        n = series.n_slots - lag
        targets = series.counts[lag:]
        target_ts = series.timestamps[lag:]
    windows = np.stack([full[i:i + lag] for i in range(n)])
    names = series.region_labels + CYCLICAL_NAMES
    return WindowedDataset(windows, np.array(targets), lag, names, np.array(target_ts))


class MinMaxScaler:
    """Per-column min-max scaling to [0, 1], fitted on training data only.

    Input columns and target columns are fitted separately; degenerate
    columns (max == min) map to 0. ``fit``/``transform`` follow the usual
    estimator conventions and test-time values outside the training range
    map outside [0, 1].
    """

    def __init__(self):
        self.input_min_ = None
        self.input_max_ = None
        self.target_min_ = None
        self.target_max_ = None

    def fit(self, windows: WindowedDataset) -> "MinMaxScaler":
        flat = windows.inputs.reshape(-1, windows.inputs.shape[2])
        self.input_min_ = flat.min(axis=0)
        self.input_max_ = flat.max(axis=0)
        self.target_min_ = windows.targets.min(axis=0)
        self.target_max_ = windows.targets.max(axis=0)
        for name, lo, hi in [("input", self.input_min_, self.input_max_),
                             ("target", self.target_min_, self.target_max_)]:
            degenerate = np.flatnonzero(hi == lo)
            if degenerate.size:
                logger.warning(
                    "%s columns %s are constant; scaling them to 0",
                    name, degenerate.tolist(),
                )
        return self

    def _check_fitted(self):
        if self.input_min_ is None:
            raise RuntimeError("scaler is not fitted")

    @staticmethod
    def _scale(x, lo, hi):
        span = hi - lo
        safe = np.where(span == 0, 1.0, span)
        scaled = (x - lo) / safe
        return np.where(span == 0, 0.0, scaled)

    def transform(self, windows: WindowedDataset) -> WindowedDataset:
        self._check_fitted()
        inputs = self._scale(windows.inputs, self.input_min_, self.input_max_)
        targets = self._scale(windows.targets, self.target_min_, self.target_max_)
        return WindowedDataset(
            inputs, targets, windows.lag, windows.feature_names,
            windows.target_timestamps,
        )

    def transform_inputs(self, inputs: np.ndarray) -> np.ndarray:
        self._check_fitted()
        return self._scale(inputs, self.input_min_, self.input_max_)

    def inverse_transform_targets(self, scaled: np.ndarray) -> np.ndarray:
        self._check_fitted()
        span = self.target_max_ - self.target_min_
        return scaled * span + self.target_min_

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "input_min": self.input_min_.tolist(),
            "input_max": self.input_max_.tolist(),
            "target_min": self.target_min_.tolist(),
            "target_max": self.target_max_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        scaler = cls()
        scaler.input_min_ = np.asarray(d["input_min"], dtype=np.float64)
        scaler.input_max_ = np.asarray(d["input_max"], dtype=np.float64)
        scaler.target_min_ = np.asarray(d["target_min"], dtype=np.float64)
        scaler.target_max_ = np.asarray(d["target_max"], dtype=np.float64)
        return scaler


class IdentityScaler:
    """Drop-in scaler that leaves values untouched (scaling disabled)."""

    def fit(self, windows):
        return self

    def transform(self, windows):
        return windows

    def transform_inputs(self, inputs):
        return inputs

    def inverse_transform_targets(self, scaled):
        return scaled

    def to_dict(self):
        return {"identity": True}


def descriptive_stats(series: MobilitySeries) -> dict[str, np.ndarray]:
    """Per-region min, max, mean, sample std, and median over all slots."""
    counts = series.counts
    if np.isnan(counts).any():
        raise ValueError("descriptive_stats expects a cleaned (gap-free) series")
    return {
        "min": counts.min(axis=0),
        "max": counts.max(axis=0),
        "mean": counts.mean(axis=0),
        "std": counts.std(axis=0, ddof=1),
        "median": np.median(counts, axis=0),
    }
